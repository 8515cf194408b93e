//! One finite-difference case per differentiable tape operation.

use pcb_core::autograd::{ParamStore, Tape, Tensor, Var};
use pcb_core::rng::stream_rng;
use pcb_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Tape) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub params: ParamStore,
    pub build: Build,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled by a step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to `sum(out * w)` with fixed random weights, so every output
/// element contributes a distinct amount to the loss.
pub fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(&mut stream_rng(seed, 999), &shape);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t).unwrap();
    }
    s
}

fn case(
    name: &'static str,
    params: ParamStore,
    build: impl Fn(&mut Tape) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        params,
        build: Box::new(build),
    }
}

pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = stream_rng(seed, 0);
    let r = &mut rng;
    let mut cases = Vec::new();

    let a = random_tensor(r, &[3, 4]);
    let b = random_tensor(r, &[4, 2]);
    cases.push(case("matmul", store(vec![("a", a), ("b", b)]), move |t| {
        let a = t.param_by_name("a")?;
        let b = t.param_by_name("b")?;
        let y = t.matmul(a, b)?;
        readout(t, y, seed)
    }));

    for name in ["add", "sub", "mul"] {
        let a = random_tensor(r, &[2, 3]);
        let b = random_tensor(r, &[2, 3]);
        cases.push(case(name, store(vec![("a", a), ("b", b)]), move |t| {
            let a = t.param_by_name("a")?;
            let b = t.param_by_name("b")?;
            let y = match name {
                "add" => t.add(a, b)?,
                "sub" => t.sub(a, b)?,
                _ => t.mul(a, b)?,
            };
            readout(t, y, seed)
        }));
    }

    let a = random_tensor(r, &[3, 4]);
    let b = random_tensor(r, &[4]);
    cases.push(case("add_bias", store(vec![("a", a), ("b", b)]), move |t| {
        let a = t.param_by_name("a")?;
        let b = t.param_by_name("b")?;
        let y = t.add_bias(a, b)?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[2, 3]);
    let c = random_tensor(r, &[2, 3]);
    cases.push(case("add_const", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.add_const(a, &c)?;
        let y = t.mul(y, y)?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[2, 3]);
    cases.push(case("scale", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.scale(a, -1.7);
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 2]);
    let b = random_tensor(r, &[3, 1]);
    let c = random_tensor(r, &[3, 3]);
    cases.push(case(
        "concat_cols",
        store(vec![("a", a), ("b", b), ("c", c)]),
        move |t| {
            let a = t.param_by_name("a")?;
            let b = t.param_by_name("b")?;
            let c = t.param_by_name("c")?;
            let y = t.concat_cols(&[a, b, c, a])?;
            readout(t, y, seed)
        },
    ));

    let a = random_tensor(r, &[2, 3]);
    let b = random_tensor(r, &[1, 3]);
    cases.push(case("concat_rows", store(vec![("a", a), ("b", b)]), move |t| {
        let a = t.param_by_name("a")?;
        let b = t.param_by_name("b")?;
        let y = t.concat_rows(&[b, a, b])?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[5, 3]);
    cases.push(case("slice_rows", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.slice_rows(a, 1..4)?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 5]);
    cases.push(case("slice_cols", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.slice_cols(a, 2..5)?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("transpose", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.transpose(a);
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("reshape", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.reshape(a, vec![2, 6])?;
        readout(t, y, seed)
    }));

    let table = random_tensor(r, &[6, 3]);
    cases.push(case("embedding", store(vec![("table", table)]), move |t| {
        let table = t.param_by_name("table")?;
        let y = t.embedding(table, &[4, 0, 4, 5])?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 5]);
    cases.push(case("softmax", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.softmax(a, None)?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 5]);
    cases.push(case("softmax_masked", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.softmax(a, Some(vec![true, false, true, true, false]))?;
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 6]);
    let g = random_tensor(r, &[6]);
    let b = random_tensor(r, &[6]);
    cases.push(case(
        "layer_norm",
        store(vec![("a", a), ("gamma", g), ("beta", b)]),
        move |t| {
            let a = t.param_by_name("a")?;
            let g = t.param_by_name("gamma")?;
            let b = t.param_by_name("beta")?;
            let y = t.layer_norm(a, g, b)?;
            readout(t, y, seed)
        },
    ));

    let a = away_from_zero(r, &[3, 4]);
    cases.push(case("relu", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.relu(a);
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("sigmoid", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.sigmoid(a);
        readout(t, y, seed)
    }));

    let a = random_tensor(r, &[4, 5]);
    cases.push(case("dropout", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let mut drng = stream_rng(seed, 7);
        let y = t.dropout(a, 0.3, true, &mut drng)?;
        readout(t, y, seed)
    }));

    for (name, p) in [("attention", 0.0), ("attention_dropout", 0.25)] {
        let q = random_tensor(r, &[5, 4]);
        let k = random_tensor(r, &[5, 4]);
        let v = random_tensor(r, &[5, 4]);
        cases.push(case(
            name,
            store(vec![("q", q), ("k", k), ("v", v)]),
            move |t| {
                let q = t.param_by_name("q")?;
                let k = t.param_by_name("k")?;
                let v = t.param_by_name("v")?;
                let mut drng = stream_rng(seed, 8);
                let y = t.attention(
                    q,
                    k,
                    v,
                    2,
                    vec![0..3, 3..5],
                    Some(vec![true, false, true, true, true]),
                    Some((p, &mut drng)),
                )?;
                readout(t, y, seed)
            },
        ));
    }

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("sum", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let sq = t.mul(a, a)?;
        Ok(t.sum(sq))
    }));

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("mean", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let sq = t.mul(a, a)?;
        Ok(t.mean(sq))
    }));

    let a = random_tensor(r, &[3, 4]);
    cases.push(case("row_sum", store(vec![("a", a)]), move |t| {
        let a = t.param_by_name("a")?;
        let y = t.row_sum(a);
        readout(t, y, seed)
    }));

    for target in [0.0, 1.0] {
        let a = random_tensor(r, &[1, 1]);
        let name = if target == 0.0 { "bce_y0" } else { "bce_y1" };
        cases.push(case(name, store(vec![("logit", a)]), move |t| {
            let a = t.param_by_name("logit")?;
            let a = t.scale(a, 3.0);
            t.bce_with_logits(a, target)
        }));
    }

    let a = random_tensor(r, &[1, 5]);
    cases.push(case("ce", store(vec![("logits", a)]), move |t| {
        let a = t.param_by_name("logits")?;
        let a = t.scale(a, 2.0);
        t.ce_with_logits(a, 3)
    }));

    cases
}
