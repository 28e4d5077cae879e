// Dev scratch: linear probe of object position from pooled flow reps.
// Run: cargo test -p visaflow --test probe_scratch -- --nocapture

use ndarray::{Array1, Array2};
use visaflow::envsim::{
    render, Domain, ObjColor, ObjShape, Rect, RenderSize, SceneObject, Vec2, WorldState, Zone,
};
use visaflow::flowencode::{amplify, build_mask, FrozenEncoder};

fn state_at(pos: Vec2) -> WorldState {
    WorldState {
        manip_pos: Vec2::new(0.15, 0.85),
        gripper_closed: false,
        objects: vec![SceneObject { id: "red_block".into(), shape: ObjShape::Square, color: ObjColor::Red, pos }],
        zones: vec![Zone { id: "zone".into(), rect: Rect { cx: 0.5, cy: 0.2, half_w: 0.12, half_h: 0.12 } }],
        domain: Domain::Target,
        step_index: 0,
    }
}

fn ridge_fit(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Array1<f64> {
    // (X^T X + lambda I) w = X^T y, solved by Gaussian elimination.
    let d = x.ncols();
    let mut a = x.t().dot(x);
    for i in 0..d {
        a[[i, i]] += lambda;
    }
    let mut b = x.t().dot(y);
    // Gaussian elimination with partial pivoting.
    let mut m = a;
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..d {
                let t = m[[col, c]];
                m[[col, c]] = m[[piv, c]];
                m[[piv, c]] = t;
            }
            b.swap(col, piv);
        }
        let p = m[[col, col]];
        for r in col + 1..d {
            let f = m[[r, col]] / p;
            for c in col..d {
                m[[r, c]] -= f * m[[col, c]];
            }
            b[r] -= f * b[col];
        }
    }
    let mut w = Array1::zeros(d);
    for r in (0..d).rev() {
        let mut s = b[r];
        for c in r + 1..d {
            s -= m[[r, c]] * w[c];
        }
        w[r] = s / m[[r, r]];
    }
    w
}

#[test]
fn probe_object_position_from_flow_rep() {
    let size = RenderSize::default();
    let variants: Vec<(String, FrozenEncoder, f32)> = vec![
        ("sin core2 n900".into(), FrozenEncoder::with_init(0, 64, 8, 1.0, 1.0, 2.0, true), 0.5),
        ("sin core2 a0 n900".into(), FrozenEncoder::with_init(0, 64, 8, 1.0, 1.0, 2.0, true), 0.0),
        ("base n900".into(), FrozenEncoder::new(0, 64, 8), 0.5),
    ];
    for (label, enc, alpha) in variants {
        let dim = enc.d;
        let n = 900;
        let mut feats = Array2::zeros((n, dim + 1));
        let mut tx = Array1::zeros(n);
        let mut ty = Array1::zeros(n);
        let mut rng_i = 0u64;
        for row in 0..n {
            rng_i += 1;
            let mut rng = visaflow::rng::stream("probe", &[rng_i]);
            use rand::Rng;
            let pos = Vec2::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let st = state_at(pos);
            let frame = render(&st, size);
            // amplification mask centered on the object (oracle points)
            let (px, py) = visaflow::envsim::arena_to_px(pos, size);
            let mask = build_mask(&[[px, py]], 3.0, 64, 64);
            let amped = amplify(&frame, &mask, alpha).unwrap();
            let z = enc.encode(&amped).unwrap();
            for j in 0..dim {
                feats[[row, j]] = z.vector[j] as f64;
            }
            feats[[row, dim]] = 1.0;
            tx[row] = pos.x as f64;
            ty[row] = pos.y as f64;
        }
        let train = 800;
        let (fx, fy) = (feats.slice(ndarray::s![..train, ..]).to_owned(), feats.slice(ndarray::s![train.., ..]).to_owned());
        let wx = ridge_fit(&fx, &tx.slice(ndarray::s![..train]).to_owned(), 1e-3);
        let wy = ridge_fit(&fx, &ty.slice(ndarray::s![..train]).to_owned(), 1e-3);
        let px = fy.dot(&wx);
        let py = fy.dot(&wy);
        let mut err = 0.0;
        for i in 0..n - train {
            let dx = px[i] - tx[train + i];
            let dy = py[i] - ty[train + i];
            err += (dx * dx + dy * dy).sqrt();
        }
        err /= (n - train) as f64;

        // 1-NN probe: is position information present at all (even nonlinearly)?
        let mut nn_err = 0.0;
        for i in train..n {
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..train {
                let mut d2 = 0.0;
                for j in 0..dim {
                    let d = feats[[i, j]] - feats[[k, j]];
                    d2 += d * d;
                }
                if d2 < best.0 {
                    best = (d2, k);
                }
            }
            let dx = tx[best.1] - tx[i];
            let dy = ty[best.1] - ty[i];
            nn_err += (dx * dx + dy * dy).sqrt();
        }
        nn_err /= (n - train) as f64;
        println!("{label}: linear probe err = {err:.4}, 1-NN err = {nn_err:.4} arena units");
    }
}
