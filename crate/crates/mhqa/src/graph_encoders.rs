//! Message passing over the mention graph.
//!
//! Each step every node sums its neighbors' current states into one message
//! and updates from that message alone. Updates are synchronous: all messages
//! for step t+1 read states from step t. The gated variant keeps a per-node
//! memory cell across steps; the plain variant is a single squashed affine.
//!
//! Neighbor states are summed in value order rather than index order, so the
//! result is bitwise invariant under any relabeling of the nodes.

use crate::autodiff::{BoundParams, Tape, TensorId};
use crate::encoders::Activation;

/// Gate parameters for the gated graph cell.
#[derive(Debug, Clone, Copy)]
pub struct GrnWeights {
    pub w_i: TensorId,
    pub b_i: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
    pub w_f: TensorId,
    pub b_f: TensorId,
    pub w_u: TensorId,
    pub b_u: TensorId,
}

pub const GRN_PART_NAMES: [&str; 8] = ["w_i", "b_i", "w_o", "b_o", "w_f", "b_f", "w_u", "b_u"];

impl GrnWeights {
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        let get = |part: &str| bound.get(&format!("{}.{}", prefix, part));
        GrnWeights {
            w_i: get("w_i"),
            b_i: get("b_i"),
            w_o: get("w_o"),
            b_o: get("b_o"),
            w_f: get("w_f"),
            b_f: get("b_f"),
            w_u: get("w_u"),
            b_u: get("b_u"),
        }
    }
}

/// Parameters for the convolutional step.
#[derive(Debug, Clone, Copy)]
pub struct GcnWeights {
    pub w: TensorId,
    pub b: TensorId,
}

impl GcnWeights {
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        GcnWeights {
            w: bound.get(&format!("{}.w", prefix)),
            b: bound.get(&format!("{}.b", prefix)),
        }
    }
}

/// Per-node initial state: affine over the mention representation
/// concatenated with the question representation. Cells start at zero.
pub fn init_states(
    tape: &mut Tape,
    w: TensorId,
    b: TensorId,
    mention_reps: &[TensorId],
    question_rep: TensorId,
) -> Vec<TensorId> {
    mention_reps
        .iter()
        .map(|&m| {
            let cat = tape.concat(&[m, question_rep]);
            tape.affine(w, cat, b)
        })
        .collect()
}

/// Sum of neighbor states (plus the node's own state when `self_loop`).
/// Summands are ordered by value so node numbering cannot affect the result.
fn message(
    tape: &mut Tape,
    states: &[TensorId],
    neighbors: &[usize],
    node: usize,
    self_loop: bool,
) -> TensorId {
    let mut ids: Vec<TensorId> = neighbors.iter().map(|&k| states[k]).collect();
    if self_loop {
        ids.push(states[node]);
    }
    if ids.is_empty() {
        let dim = tape.value(states[node]).len();
        return tape.zeros(dim);
    }
    ids.sort_by(|a, b| {
        tape.value(*a)
            .data()
            .partial_cmp(tape.value(*b).data())
            .expect("tape values are finite")
    });
    tape.add_n(&ids)
}

/// One synchronous gated update. Every gate reads only the message; the
/// forget gate scales the node's previous cell.
pub fn grn_step(
    tape: &mut Tape,
    w: &GrnWeights,
    adjacency: &[Vec<usize>],
    states: &[TensorId],
    cells: &[TensorId],
    self_loop: bool,
    candidate: Activation,
) -> (Vec<TensorId>, Vec<TensorId>) {
    assert_eq!(
        adjacency.len(),
        states.len(),
        "adjacency/state length mismatch"
    );
    assert_eq!(cells.len(), states.len(), "cell/state length mismatch");
    let n = states.len();
    let mut new_states = Vec::with_capacity(n);
    let mut new_cells = Vec::with_capacity(n);
    for j in 0..n {
        let m = message(tape, states, &adjacency[j], j, self_loop);
        let pre_i = tape.affine(w.w_i, m, w.b_i);
        let i = tape.sigmoid(pre_i);
        let pre_o = tape.affine(w.w_o, m, w.b_o);
        let o = tape.sigmoid(pre_o);
        let pre_f = tape.affine(w.w_f, m, w.b_f);
        let f = tape.sigmoid(pre_f);
        let pre_u = tape.affine(w.w_u, m, w.b_u);
        let u = candidate.apply(tape, pre_u);
        let iu = tape.mul(i, u);
        let fc = tape.mul(f, cells[j]);
        let c = tape.add(iu, fc);
        let tc = tape.tanh(c);
        let s = tape.mul(o, tc);
        new_states.push(s);
        new_cells.push(c);
    }
    (new_states, new_cells)
}

/// One synchronous convolutional update: squashed affine of the message.
pub fn gcn_step(
    tape: &mut Tape,
    w: &GcnWeights,
    adjacency: &[Vec<usize>],
    states: &[TensorId],
    self_loop: bool,
) -> Vec<TensorId> {
    assert_eq!(
        adjacency.len(),
        states.len(),
        "adjacency/state length mismatch"
    );
    (0..states.len())
        .map(|j| {
            let m = message(tape, states, &adjacency[j], j, self_loop);
            let pre = tape.affine(w.w, m, w.b);
            tape.sigmoid(pre)
        })
        .collect()
}

fn step_weights<W>(weights: &[W], steps: usize, t: usize) -> &W {
    assert!(
        weights.len() == 1 || weights.len() == steps,
        "need 1 shared or {} per-step weight sets, got {}",
        steps,
        weights.len()
    );
    if weights.len() == 1 {
        &weights[0]
    } else {
        &weights[t]
    }
}

/// State trajectory over `steps` gated updates; index 0 is the initial
/// states, index t the states after t updates.
pub fn run_grn(
    tape: &mut Tape,
    weights: &[GrnWeights],
    adjacency: &[Vec<usize>],
    init: &[TensorId],
    steps: usize,
    self_loop: bool,
    candidate: Activation,
) -> Vec<Vec<TensorId>> {
    let mut trajectory = vec![init.to_vec()];
    if init.is_empty() {
        trajectory.extend((0..steps).map(|_| Vec::new()));
        return trajectory;
    }
    let mut cells: Vec<TensorId> = init
        .iter()
        .map(|&s| {
            let dim = tape.value(s).len();
            tape.zeros(dim)
        })
        .collect();
    for t in 0..steps {
        let w = step_weights(weights, steps, t);
        let (s, c) = grn_step(
            tape,
            w,
            adjacency,
            trajectory.last().unwrap(),
            &cells,
            self_loop,
            candidate,
        );
        cells = c;
        trajectory.push(s);
    }
    trajectory
}

/// State trajectory over `steps` convolutional updates.
pub fn run_gcn(
    tape: &mut Tape,
    weights: &[GcnWeights],
    adjacency: &[Vec<usize>],
    init: &[TensorId],
    steps: usize,
    self_loop: bool,
) -> Vec<Vec<TensorId>> {
    let mut trajectory = vec![init.to_vec()];
    if init.is_empty() {
        trajectory.extend((0..steps).map(|_| Vec::new()));
        return trajectory;
    }
    for t in 0..steps {
        let w = step_weights(weights, steps, t);
        let s = gcn_step(tape, w, adjacency, trajectory.last().unwrap(), self_loop);
        trajectory.push(s);
    }
    trajectory
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore, Tensor, DEFAULT_EPSILON};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_grn(tape: &mut Tape, h: usize) -> GrnWeights {
        let m = |tape: &mut Tape| tape.leaf(Tensor::zeros(&[h, h]));
        let v = |tape: &mut Tape| tape.leaf(Tensor::zeros(&[h]));
        GrnWeights {
            w_i: m(tape),
            b_i: v(tape),
            w_o: m(tape),
            b_o: v(tape),
            w_f: m(tape),
            b_f: v(tape),
            w_u: m(tape),
            b_u: v(tape),
        }
    }

    fn random_grn(tape: &mut Tape, h: usize, seed: u64) -> GrnWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |tape: &mut Tape| {
            let t = Tensor::from_fn(&[h, h], |_| rng.gen_range(-0.6..0.6));
            tape.leaf(t)
        };
        let w_i = m(tape);
        let w_o = m(tape);
        let w_f = m(tape);
        let w_u = m(tape);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
        let mut v = |tape: &mut Tape| {
            let t = Tensor::from_fn(&[h], |_| rng2.gen_range(-0.6..0.6));
            tape.leaf(t)
        };
        let b_i = v(tape);
        let b_o = v(tape);
        let b_f = v(tape);
        let b_u = v(tape);
        GrnWeights {
            w_i,
            b_i,
            w_o,
            b_o,
            w_f,
            b_f,
            w_u,
            b_u,
        }
    }

    fn random_states(tape: &mut Tape, n: usize, h: usize, seed: u64) -> Vec<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = Tensor::from_fn(&[h], |_| rng.gen_range(-1.0..1.0));
                tape.leaf(t)
            })
            .collect()
    }

    #[test]
    fn zero_parameters_give_known_constants() {
        // All gates sit at 1/2 when weights and biases are zero, the cell
        // starts at zero, so one gated step lands every node on
        // 0.5 * tanh(0.25); the convolutional step lands on 0.5 exactly.
        let mut tape = Tape::new(0);
        let h = 3;
        let grn = zero_grn(&mut tape, h);
        let gcn = GcnWeights {
            w: tape.leaf(Tensor::zeros(&[h, h])),
            b: tape.leaf(Tensor::zeros(&[h])),
        };
        let init = random_states(&mut tape, 4, h, 1);
        let adjacency: Vec<Vec<usize>> = vec![vec![]; 4];
        let grn_traj = run_grn(
            &mut tape,
            &[grn],
            &adjacency,
            &init,
            1,
            false,
            Activation::Sigmoid,
        );
        let expected = 0.122_459_331_201_854_57_f64;
        for &s in &grn_traj[1] {
            for &x in tape.value(s).data() {
                assert!((x - expected).abs() < 1e-15, "got {}", x);
            }
        }
        let gcn_traj = run_gcn(&mut tape, &[gcn], &adjacency, &init, 1, false);
        for &s in &gcn_traj[1] {
            for &x in tape.value(s).data() {
                assert_eq!(x, 0.5);
            }
        }
    }

    #[test]
    fn relabeling_nodes_relabels_states_bitwise() {
        let n = 6;
        let h = 4;
        let adjacency: Vec<Vec<usize>> = vec![
            vec![1, 2],
            vec![0, 3],
            vec![0, 3, 4],
            vec![1, 2],
            vec![2, 5],
            vec![4],
        ];
        let perm = [3usize, 5, 0, 2, 4, 1]; // node j becomes perm[j]
        let run = |permuted: bool| {
            let mut tape = Tape::new(0);
            let w = random_grn(&mut tape, h, 40);
            let base: Vec<Tensor> = {
                let mut rng = ChaCha8Rng::seed_from_u64(41);
                (0..n)
                    .map(|_| Tensor::from_fn(&[h], |_| rng.gen_range(-1.0..1.0)))
                    .collect()
            };
            let (adj, init): (Vec<Vec<usize>>, Vec<TensorId>) = if permuted {
                let mut adj = vec![Vec::new(); n];
                let mut init = vec![Tensor::zeros(&[h]); n];
                for j in 0..n {
                    adj[perm[j]] = adjacency[j].iter().map(|&k| perm[k]).collect();
                    init[perm[j]] = base[j].clone();
                }
                let ids = init.into_iter().map(|t| tape.leaf(t)).collect();
                (adj, ids)
            } else {
                let ids = base.iter().map(|t| tape.leaf(t.clone())).collect();
                (adjacency.clone(), ids)
            };
            let traj = run_grn(&mut tape, &[w], &adj, &init, 3, false, Activation::Sigmoid);
            traj[3]
                .iter()
                .map(|&s| tape.value(s).clone())
                .collect::<Vec<_>>()
        };
        let plain = run(false);
        let permuted = run(true);
        for j in 0..n {
            assert_eq!(
                plain[j], permuted[perm[j]],
                "state of node {} changed under relabeling",
                j
            );
        }
    }

    #[test]
    fn influence_travels_one_hop_per_step() {
        // Path 0-1-2-3-4. Perturbing node 0's initial state cannot reach
        // node d before step d because every update reads only neighbors.
        let adjacency: Vec<Vec<usize>> = vec![vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3]];
        let run = |bump: f64, steps: usize| {
            let mut tape = Tape::new(0);
            let w = random_grn(&mut tape, 3, 50);
            let mut init = random_states(&mut tape, 5, 3, 51);
            if bump != 0.0 {
                let mut t = tape.value(init[0]).clone();
                t.data_mut()[0] += bump;
                init[0] = tape.leaf(t);
            }
            let traj = run_grn(
                &mut tape,
                &[w],
                &adjacency,
                &init,
                steps,
                false,
                Activation::Sigmoid,
            );
            traj[steps]
                .iter()
                .map(|&s| tape.value(s).clone())
                .collect::<Vec<_>>()
        };
        for steps in 1..=3 {
            let base = run(0.0, steps);
            let bumped = run(0.7, steps);
            for d in 0..5 {
                if d > steps {
                    assert_eq!(base[d], bumped[d], "node {} moved after {} steps", d, steps);
                }
            }
            assert_ne!(
                base[steps], bumped[steps],
                "influence should reach node {}",
                steps
            );
        }
    }

    #[test]
    fn step_matches_independent_oracle_on_old_states() {
        // Straight-line reimplementation of one update that only ever reads
        // the previous states. Agreement pins down the two-buffer semantics:
        // an in-place update would feed node 0's new state into node 1.
        let adjacency: Vec<Vec<usize>> = vec![vec![1], vec![0, 2], vec![1]];
        let h = 3;
        let mut tape = Tape::new(0);
        let w = random_grn(&mut tape, h, 60);
        let states = random_states(&mut tape, 3, h, 61);
        let cells = random_states(&mut tape, 3, h, 62);
        let (new_s, new_c) = grn_step(
            &mut tape,
            &w,
            &adjacency,
            &states,
            &cells,
            false,
            Activation::Sigmoid,
        );

        let matv = |m: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        };
        let sig =
            |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect() };
        for j in 0..3 {
            let mut msg = vec![0.0; h];
            for &k in &adjacency[j] {
                for (d, x) in tape.value(states[k]).data().iter().enumerate() {
                    msg[d] += x;
                }
            }
            let gate = |wm: &Tensor, b: TensorId, tape: &Tape| -> Vec<f64> {
                let mut v = matv(wm, &msg);
                for (d, x) in tape.value(b).data().iter().enumerate() {
                    v[d] += x;
                }
                v
            };
            let i = sig(gate(tape.value(w.w_i), w.b_i, &tape));
            let o = sig(gate(tape.value(w.w_o), w.b_o, &tape));
            let f = sig(gate(tape.value(w.w_f), w.b_f, &tape));
            let u = sig(gate(tape.value(w.w_u), w.b_u, &tape));
            let c_prev = tape.value(cells[j]).data();
            let c: Vec<f64> = (0..h).map(|d| i[d] * u[d] + f[d] * c_prev[d]).collect();
            let s: Vec<f64> = (0..h).map(|d| o[d] * c[d].tanh()).collect();
            let got_c = tape.value(new_c[j]).data();
            let got_s = tape.value(new_s[j]).data();
            for d in 0..h {
                assert!((got_c[d] - c[d]).abs() < 1e-12, "cell {} dim {}", j, d);
                assert!((got_s[d] - s[d]).abs() < 1e-12, "state {} dim {}", j, d);
            }
        }
    }

    #[test]
    fn saturated_low_forget_bias_decays_the_cell() {
        // Zero weights with a very negative forget bias and a very negative
        // input bias: each step multiplies the cell by sigmoid(-12) and adds
        // sigmoid(-30)/2, so an injected cell must shrink monotonically.
        let mut tape = Tape::new(0);
        let h = 3;
        let mut w = zero_grn(&mut tape, h);
        w.b_f = tape.leaf(Tensor::from_fn(&[h], |_| -12.0));
        w.b_i = tape.leaf(Tensor::from_fn(&[h], |_| -30.0));
        let adjacency: Vec<Vec<usize>> = vec![vec![]];
        let mut states = vec![tape.zeros(h)];
        let mut cells = vec![tape.leaf(Tensor::from_fn(&[h], |_| 1.0))];
        let mut prev_norm = tape.value(cells[0]).norm();
        for step in 0..3 {
            let (s, c) = grn_step(
                &mut tape,
                &w,
                &adjacency,
                &states,
                &cells,
                false,
                Activation::Sigmoid,
            );
            states = s;
            cells = c;
            let norm = tape.value(cells[0]).norm();
            assert!(
                norm < prev_norm,
                "step {}: cell norm {} did not decay from {}",
                step,
                norm,
                prev_norm
            );
            prev_norm = norm;
        }
        // Three near-closed forget gates wipe the injected memory down to
        // the tiny additive floor left by the saturated input gate.
        assert!(prev_norm < 1e-10, "cell norm {} still large", prev_norm);
    }

    #[test]
    fn self_loop_feeds_own_state_into_message() {
        let mut tape = Tape::new(0);
        let w = random_grn(&mut tape, 3, 70);
        let init = random_states(&mut tape, 1, 3, 71);
        let adjacency: Vec<Vec<usize>> = vec![vec![]];
        let without = run_grn(
            &mut tape,
            &[w],
            &adjacency,
            &init,
            1,
            false,
            Activation::Sigmoid,
        );
        let with = run_grn(
            &mut tape,
            &[w],
            &adjacency,
            &init,
            1,
            true,
            Activation::Sigmoid,
        );
        assert_ne!(tape.value(without[1][0]), tape.value(with[1][0]));
    }

    #[test]
    fn per_step_weights_differ_from_shared() {
        let mut tape = Tape::new(0);
        let w0 = random_grn(&mut tape, 3, 80);
        let w1 = random_grn(&mut tape, 3, 81);
        let init = random_states(&mut tape, 2, 3, 82);
        let adjacency: Vec<Vec<usize>> = vec![vec![1], vec![0]];
        let shared = run_grn(
            &mut tape,
            &[w0],
            &adjacency,
            &init,
            2,
            false,
            Activation::Sigmoid,
        );
        let per_step = run_grn(
            &mut tape,
            &[w0, w1],
            &adjacency,
            &init,
            2,
            false,
            Activation::Sigmoid,
        );
        assert_eq!(tape.value(shared[1][0]), tape.value(per_step[1][0]));
        assert_ne!(tape.value(shared[2][0]), tape.value(per_step[2][0]));
    }

    #[test]
    fn zero_steps_returns_only_the_init_states() {
        let mut tape = Tape::new(0);
        let init = random_states(&mut tape, 3, 2, 90);
        let adjacency: Vec<Vec<usize>> = vec![vec![], vec![], vec![]];
        let traj = run_grn(
            &mut tape,
            &[],
            &adjacency,
            &init,
            0,
            false,
            Activation::Sigmoid,
        );
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0], init);
    }

    #[test]
    fn init_states_concatenate_mention_and_question() {
        let mut tape = Tape::new(0);
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.5, 0.0]));
        let m0 = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let q = tape.leaf(Tensor::vector(vec![7.0]));
        let init = init_states(&mut tape, w, b, &[m0], q);
        assert_eq!(tape.value(init[0]).data(), &[2.5, 7.0]);
    }

    #[test]
    fn gated_run_gradients_match_finite_differences() {
        let h = 3;
        let rep = 2;
        let adjacency: Vec<Vec<usize>> = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        store.insert(
            "graph.w_init",
            Tensor::from_fn(&[h, rep + rep], |_| rng.gen_range(-0.4..0.4)),
        );
        store.insert(
            "graph.b_init",
            Tensor::from_fn(&[h], |_| rng.gen_range(-0.4..0.4)),
        );
        for part in GRN_PART_NAMES {
            let shape: Vec<usize> = if part.starts_with('w') {
                vec![h, h]
            } else {
                vec![h]
            };
            store.insert(
                &format!("grn.{}", part),
                Tensor::from_fn(&shape, |_| rng.gen_range(-0.4..0.4)),
            );
        }
        let mentions: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[rep], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let question = Tensor::from_fn(&[rep], |_| rng.gen_range(-1.0..1.0));

        let report = grad_check(&mut store, DEFAULT_EPSILON, |s| {
            let mut tape = Tape::new(0);
            let bound = s.bind_all(&mut tape);
            let w_init = bound.get("graph.w_init");
            let b_init = bound.get("graph.b_init");
            let w = GrnWeights::resolve(&bound, "grn");
            let reps: Vec<TensorId> = mentions.iter().map(|t| tape.leaf(t.clone())).collect();
            let q = tape.leaf(question.clone());
            let init = init_states(&mut tape, w_init, b_init, &reps, q);
            let traj = run_grn(
                &mut tape,
                &[w],
                &adjacency,
                &init,
                2,
                false,
                Activation::Sigmoid,
            );
            let terms: Vec<TensorId> = traj[2].iter().map(|&s| tape.sum_squares(s)).collect();
            let loss = tape.add_n(&terms);
            (tape, loss)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "graph gradcheck failed: {:?}",
            report
        );
    }
}
