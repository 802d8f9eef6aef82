use eventformer_bench::{random_costs, sequences};

#[test]
fn inputs_are_deterministic_and_well_formed() {
    let a = random_costs(5, 3);
    assert_eq!(a, random_costs(5, 3));
    assert!((0..5).all(|r| (0..5).all(|c| (0.0..1.0).contains(&a.get(r, c)))));
    let s = sequences(3, 1);
    assert_eq!(s, sequences(3, 1));
    assert!(s.iter().all(|x| x.features.rows() == x.length));
}
