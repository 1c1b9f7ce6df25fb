mod common;

use biparam_core::dyadic::{DyadicGrid, GridParams};
use biparam_core::journe::{default_shadow_constant, OmegaAnalysis, OpenSetOmega, Weights};
use biparam_core::rng::stream;

#[test]
fn families_partners_and_two_maximal_match_brute_force() {
    let p = GridParams::new(1, 1.0, 2, 0, 3).unwrap();
    for s in 0..12u64 {
        let mut rng = stream(7, s);
        let (g1, g2) = (DyadicGrid::random_from(p, &mut rng).unwrap(), DyadicGrid::random_from(p, &mut rng).unwrap());
        let omega = if s % 3 == 0 {
            OpenSetOmega::staircase(&g1, &g2, 2, &mut rng).unwrap()
        } else {
            OpenSetOmega::random_union(&g1, &g2, 1 + s as usize % 4, &mut rng).unwrap()
        };
        let an = OmegaAnalysis::new(&omega, default_shadow_constant(1, 1)).unwrap();
        let tilde = &an.shadows().omega_tilde;
        for j in g2.all_cubes() {
            let mut got = an.maximal_family(&j).unwrap();
            got.sort();
            assert_eq!(got, common::maximal_family_oracle(&g1, &g2, tilde, &j));
            for i in g1.all_cubes() {
                if common::rect_inside(&g1, &g2, omega.indicator(), &i, &j) {
                    assert_eq!(an.partner_cube(&i, &j).unwrap().cube, common::partner_oracle(&g1, &g2, tilde, &i, &j));
                } else {
                    assert!(an.partner_cube(&i, &j).is_err());
                }
            }
        }
        let mut got: Vec<_> = an.two_maximal_rectangles().unwrap().into_iter().map(|r| (r.i, r.j, r.emb1)).collect();
        got.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        assert_eq!(got, common::two_maximal_oracle(&g1, &g2, omega.indicator(), tilde));
    }
}

#[test]
fn journe_holds_with_table_weights() {
    let p = GridParams::new(1, 1.0, 2, 0, 5).unwrap();
    let w = Weights::Table(vec![1.0, 0.6, 0.3, 0.1]);
    for s in 0..20u64 {
        let mut rng = stream(8, s);
        let (g1, g2) = (DyadicGrid::random_from(p, &mut rng).unwrap(), DyadicGrid::random_from(p, &mut rng).unwrap());
        let omega = OpenSetOmega::random_union(&g1, &g2, 1 + s as usize % 5, &mut rng).unwrap();
        let res = OmegaAnalysis::new(&omega, default_shadow_constant(1, 1)).unwrap().journe_check(&w).unwrap();
        assert!(res.pass, "set {s}: {} > {}", res.lhs, res.rhs);
    }
}
