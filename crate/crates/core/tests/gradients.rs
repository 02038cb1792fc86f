mod common;

use common::*;
use gflownet::env::sequence::SeqScheme;
use gflownet::env::Environment;
use gflownet::objectives::{BackwardMode, Objective};

fn check<E: Environment>(name: &str, env: &E, objectives: &[Objective], backward: BackwardMode) {
    for (i, &obj) in objectives.iter().enumerate() {
        let v = finite_difference_violation(env, obj, backward, 10 + i as u64, 1e-4);
        assert!(v <= 1.0, "{name} {obj:?} {backward:?}: violation ratio {v}");
    }
}

const NO_MDB: [Objective; 4] = [Objective::Tb, Objective::Db, Objective::Subtb, Objective::Fldb];

#[test]
fn hypergrid_gradients() {
    let env = grid(2, 4);
    check("grid", &env, &[Objective::Tb, Objective::Db, Objective::Subtb, Objective::Fldb, Objective::Mdb], BackwardMode::Uniform);
    check("grid", &env, &NO_MDB, BackwardMode::Learned);
}

#[test]
fn sequence_gradients() {
    check("bitseq", &bitseq(SeqScheme::PrependAppend, 4, 2), &NO_MDB, BackwardMode::Learned);
    check("bitseq", &bitseq(SeqScheme::NonAutoregressive, 8, 2), &NO_MDB, BackwardMode::Uniform);
}

#[test]
fn dag_ising_phylo_gradients() {
    check("dag", &dag(3, 1), &[Objective::Mdb, Objective::Db], BackwardMode::Learned);
    check("ising", &ising(2), &[Objective::Tb, Objective::Subtb], BackwardMode::Uniform);
    check("phylo", &phylo(4, 5, 3), &[Objective::Fldb, Objective::Tb], BackwardMode::Learned);
}
