//! Central finite-difference checks against analytic gradients.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};

/// One sampled scalar coordinate of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub param: ParamId,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct CoordinateError {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<CoordinateError>,
    pub checked: usize,
}

/// `|a − n| / max(|a| + |n|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing by rounding noise: central differences at
/// `eps = 1e-5` carry about `|f|·1e-11` of it, so below `1e-6` the comparison
/// is effectively absolute.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

/// Picks up to `per_param` coordinates from every parameter accepted by
/// `include`.
pub fn sample_coordinates<R: Rng>(
    store: &ParamStore,
    per_param: usize,
    include: impl Fn(&str) -> bool,
    rng: &mut R,
) -> Vec<Coordinate> {
    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if !include(&p.name) {
            continue;
        }
        let n = p.value.numel();
        if n <= per_param {
            coords.extend((0..n).map(|offset| Coordinate { param: id, offset }));
        } else {
            for _ in 0..per_param {
                coords.push(Coordinate {
                    param: id,
                    offset: rng.random_range(0..n),
                });
            }
        }
    }
    coords
}

/// Compares `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` at each coordinate
/// and returns the worst relative error. Parameters are restored exactly.
pub fn finite_difference_check(
    mut f: impl FnMut(&ParamStore) -> f64,
    store: &mut ParamStore,
    analytic: &Gradients,
    coords: &[Coordinate],
    eps: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &c in coords {
        let original = store.value(c.param).data()[c.offset];
        store.value_mut(c.param).data_mut()[c.offset] = original + eps;
        let plus = f(store);
        store.value_mut(c.param).data_mut()[c.offset] = original - eps;
        let minus = f(store);
        store.value_mut(c.param).data_mut()[c.offset] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(c.param).data()[c.offset];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some(CoordinateError {
                coordinate: c,
                analytic: a,
                numeric,
                relative: rel,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_exact_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let theta = store.normal("theta", &[1, 8], 1.0, &mut rng);
        let loss = |s: &ParamStore| -> f64 { s.value(theta).squared_norm() };

        let mut grads = Gradients::zeros_like(&store);
        for (g, v) in grads
            .get_mut(theta)
            .data_mut()
            .iter_mut()
            .zip(store.value(theta).data())
        {
            *g = 2.0 * v;
        }
        let coords = sample_coordinates(&store, 8, |_| true, &mut rng);
        let r = finite_difference_check(loss, &mut store, &grads, &coords, 1e-5);
        assert_eq!(r.checked, 8);
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn affine_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w1 = store.normal("w1", &[4, 3], 0.7, &mut rng);
        let b1 = store.normal("b1", &[3], 0.7, &mut rng);
        let w2 = store.normal("w2", &[3, 2], 0.7, &mut rng);
        let b2 = store.normal("b2", &[2], 0.7, &mut rng);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 0.3, 2.0], vec![1.5, 0.2, -0.4, 0.1]]).unwrap();

        let forward = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let xv = t.constant(x.clone());
            let (pw1, pb1, pw2, pb2) = (t.param(w1), t.param(b1), t.param(w2), t.param(b2));
            let h = t.affine(xv, pw1, pb1).unwrap();
            let y = t.affine(h, pw2, pb2).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum(sq);
            let value = t.item(loss).unwrap();
            let grads = t.backward(loss).unwrap().params;
            (value, grads)
        };
        let (_, grads) = forward(&store);
        let coords = sample_coordinates(&store, 100, |_| true, &mut rng);
        let r = finite_difference_check(|s| forward(s).0, &mut store, &grads, &coords, 1e-5);
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use crate::math::Mask;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.normal("a", &[3, 4], 0.8, &mut rng);
        let b = store.normal("b", &[3, 4], 0.8, &mut rng);
        let g = store.normal("gamma", &[4], 0.8, &mut rng);
        let beta = store.normal("beta", &[4], 0.8, &mut rng);
        let s = store.normal("s", &[1, 1], 0.8, &mut rng);
        let table = store.normal("table", &[6, 4], 0.8, &mut rng);

        let forward = |st: &ParamStore| {
            let mut t = Tape::new(st);
            let (a, b, g, beta, s, table) = (
                t.param(a),
                t.param(b),
                t.param(g),
                t.param(beta),
                t.param(s),
                t.param(table),
            );
            let ln = t.layer_norm(a, g, beta, 1e-5).unwrap();
            let ge = t.gelu(ln);
            let m = t.mul(ge, b).unwrap();
            let sc = t.scale_by(m, s).unwrap();
            let e = t.embed(table, &[1, 4, 1]).unwrap();
            let sum = t.add(sc, e).unwrap();
            let mask = Mask::causal(3);
            let (att, _) = t.attention(sum, e, b, Some(&mask), None).unwrap();
            let sm = t.softmax(att, None).unwrap();
            let lg = t.log(sm, 1e-12);
            let ls = t.log_softmax(att);
            let row = t.slice_rows(ls, 1, 2).unwrap();
            let lg2 = t.slice_rows(lg, 0, 2).unwrap();
            let cols = t.slice_cols(lg2, 1, 2).unwrap();
            let cat = t.concat_cols(&[row, cols]).unwrap();
            let sig = t.sigmoid(cat);
            let gat = t.gather_cols(sig, &[0, 3, 3, 1]).unwrap();
            let sca = t.scatter_cols(gat, &[2, 0, 2, 1], 3).unwrap();
            let nrm = t.normalize_rows(sca);
            let pick = t.pick_rows(nrm, &[2, 0]).unwrap();
            let col = t.mul_col(sca, pick).unwrap();
            let stacked = t.concat_rows(&[col, nrm]).unwrap();
            let sub = t.sub(stacked, stacked).unwrap();
            let tot = t.add(stacked, sub).unwrap();
            let rb = t.scale_by(tot, s).unwrap();
            let loss = t.sum(rb);
            (t.item(loss).unwrap(), t.backward(loss).unwrap().params)
        };
        let (_, grads) = forward(&store);
        let coords = sample_coordinates(&store, 50, |_| true, &mut rng);
        let r = finite_difference_check(|s| forward(s).0, &mut store, &grads, &coords, 1e-5);
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }
}
