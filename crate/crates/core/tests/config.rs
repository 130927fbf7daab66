use std::path::Path;

use proptest::prelude::*;

use dimorl::config::RunConfig;
use dimorl::pipeline::CellFilter;

fn list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

fn grid_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>, Vec<f64>)> {
    (
        prop::collection::vec(0.0..100.0f64, 1..4),
        prop::collection::vec(0.0..10.0f64, 1..3),
        prop::collection::vec(1usize..20, 1..3),
        prop::collection::vec(0.0..1.0f64, 1..4),
    )
}

proptest! {
    #[test]
    fn greek_and_ascii_keys_parse_identically((b, l, h, s) in grid_strategy()) {
        let hs: Vec<f64> = h.iter().map(|&x| x as f64).collect();
        let hs = hs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ");
        let ascii = format!(
            "sweep.beta = {}\nsweep.lambda = {}\nsweep.h = [{hs}]\nsweep.sigma = {}\n",
            list(&b), list(&l), list(&s)
        );
        let greek = format!(
            "sweep.β = {}\nsweep.λ = {}\nsweep.h = [{hs}]\nsweep.σ = {}\n",
            list(&b), list(&l), list(&s)
        );
        let a = RunConfig::parse_str(&ascii, Path::new(".")).unwrap();
        let g = RunConfig::parse_str(&greek, Path::new(".")).unwrap();
        prop_assert_eq!(&a.grid, &g.grid);
        prop_assert_eq!(&a.grid.beta, &b);
        prop_assert_eq!(&a.grid.sigma, &s);
    }

    #[test]
    fn cells_are_the_full_product_and_filters_select_one((b, l, h, s) in grid_strategy(), pick in any::<prop::sample::Index>()) {
        let mut cfg = RunConfig::default();
        cfg.grid.beta = b.clone();
        cfg.grid.lambda = l.clone();
        cfg.grid.horizon = h.clone();
        cfg.grid.sigma = s.clone();
        let cells = cfg.grid.cells();
        prop_assert_eq!(cells.len(), b.len() * l.len() * h.len() * s.len());
        let c = cells[pick.index(cells.len())];
        let f: CellFilter = format!("β={:?},λ={:?},h={},σ={:?}", c.beta, c.lambda, c.horizon, c.sigma).parse().unwrap();
        prop_assert!(cells.iter().filter(|x| f.matches(x)).all(|x| x.label() == c.label()));
        prop_assert!(f.matches(&c));
    }
}

#[test]
fn scalar_is_a_one_element_list() {
    let cfg = RunConfig::parse_str("sweep.beta = 5\nseeds = 7\n", Path::new(".")).unwrap();
    assert_eq!(cfg.grid.beta, vec![5.0]);
    assert_eq!(cfg.seeds, vec![7]);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    for name in ["novice.toml", "smoke.toml"] {
        let cfg = RunConfig::parse_file(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn negative_beta_is_rejected() {
    let parsed = RunConfig::parse_str("sweep.beta = [-1]\n", Path::new("."));
    assert!(parsed.and_then(|c| c.validate()).is_err());
}
