//! Scalar-loop reimplementation of the eval-mode forward pass for one
//! episode, used as a test oracle. Shares only parameter names with the
//! tape implementation.

use super::{sinusoid, EpisodeInput, Model};
use crate::synthworld::{ELEVATIONS, HEADINGS, VIEWS};

type Mat = Vec<Vec<f64>>;

fn param<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn affine(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let mut s = b.map_or(0.0, |b| b[j]);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i * out + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn linear(m: &Model, x: &Mat, prefix: &str) -> Mat {
    let b = param(m, &format!("{prefix}.b"));
    affine(x, param(m, &format!("{prefix}.w")), Some(b), b.len())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(m: &Model, x: &Mat, prefix: &str) -> Mat {
    let g = param(m, &format!("{prefix}.g"));
    let b = param(m, &format!("{prefix}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn attention(m: &Model, xq: &Mat, xkv: &Mat, prefix: &str) -> Mat {
    let d = m.config.d;
    let heads = m.config.heads;
    let dh = d / heads;
    let q = linear(m, xq, &format!("{prefix}.q"));
    let k = affine(xkv, param(m, &format!("{prefix}.k.w")), None, d);
    let v = linear(m, xkv, &format!("{prefix}.v"));
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    linear(m, &out, &format!("{prefix}.o"))
}

fn ffn(m: &Model, x: &Mat, prefix: &str) -> Mat {
    let h = layer_norm(m, x, &format!("{prefix}.ln2"));
    let h = linear(m, &h, &format!("{prefix}.ffn1"));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let h = linear(m, &h, &format!("{prefix}.ffn2"));
    add(x, &h)
}

fn self_layer(m: &Model, x: &Mat, prefix: &str) -> Mat {
    let h = layer_norm(m, x, &format!("{prefix}.ln1"));
    let a = attention(m, &h, &h, &format!("{prefix}.attn"));
    ffn(m, &add(x, &a), prefix)
}

fn cross_layer(m: &Model, x: &Mat, mem: &Mat, prefix: &str) -> Mat {
    let hq = layer_norm(m, x, &format!("{prefix}.lnq"));
    let hm = layer_norm(m, mem, &format!("{prefix}.lnm"));
    let a = attention(m, &hq, &hm, &format!("{prefix}.attn"));
    ffn(m, &add(x, &a), prefix)
}

fn mean_rows(x: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; x[0].len()];
    for r in x {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v / x.len() as f64);
    }
    out
}

pub fn forward(m: &Model, input: &EpisodeInput) -> Vec<f64> {
    let cfg = &m.config;
    let d = cfg.d;
    let dv = m.feature_dim;
    let t_len = input.steps();
    let f = input.features.data();

    // per step, 36 view rows
    let mut views: Vec<Mat> = (0..t_len)
        .map(|t| (0..VIEWS).map(|v| f[(t * VIEWS + v) * dv..][..dv].to_vec()).collect())
        .collect();
    if dv != d {
        views = views.iter().map(|s| linear(m, s, "embed.proj")).collect();
    }
    if cfg.positional_encodings {
        for (t, step) in views.iter_mut().enumerate() {
            for (v, row) in step.iter_mut().enumerate() {
                let (a, b) = (sinusoid(t, d), sinusoid(v, d));
                for c in 0..d {
                    row[c] += a[c] + b[c];
                }
            }
        }
    }

    let text = affine(&vec![input.instruction.clone()], param(m, "fuse.text.w"), None, d);
    let text: Vec<f64> = text[0].iter().map(|&v| gelu(v)).collect();
    let fused: Vec<Mat> = views
        .iter()
        .map(|step| {
            let vis = affine(step, param(m, "fuse.vision.w"), None, d);
            let cat: Mat = vis
                .iter()
                .map(|r| r.iter().map(|&v| gelu(v)).chain(text.iter().copied()).collect())
                .collect();
            linear(m, &cat, "fuse.out")
        })
        .collect();

    let mut h: Vec<Mat> = Vec::new();
    for step in &fused {
        let mut pooled = Vec::new();
        for j in 0..HEADINGS {
            let mut group: Mat = (0..ELEVATIONS).map(|e| step[e * HEADINGS + j].clone()).collect();
            if cfg.elevation_on {
                for l in 0..cfg.elevation_layers {
                    group = self_layer(m, &group, &format!("elevation.{l}"));
                }
            }
            pooled.push(mean_rows(&group));
        }
        h.push(pooled);
    }

    if cfg.st_on {
        for step in h.iter_mut() {
            for l in 0..cfg.spatial_temporal_layers {
                *step = self_layer(m, step, &format!("spatial.{l}"));
            }
        }
        let mut flat: Mat = h.concat();
        for l in 0..cfg.spatial_temporal_layers {
            flat = self_layer(m, &flat, &format!("temporal.{l}"));
        }
        h = flat.chunks(HEADINGS).map(|c| c.to_vec()).collect();
    }

    let q: Mat = if cfg.selection_on {
        let pool = param(m, "select.queries");
        let mut q: Mat = (0..t_len)
            .map(|t| {
                let enc = if cfg.positional_encodings { sinusoid(t, d) } else { vec![0.0; d] };
                (0..d).map(|c| pool[t * d + c] + enc[c]).collect()
            })
            .collect();
        for l in 0..cfg.selection_layers {
            q = self_layer(m, &q, &format!("select.self.{l}"));
        }
        (0..t_len)
            .map(|t| {
                let mut qt = vec![q[t].clone()];
                for l in 0..cfg.selection_layers {
                    qt = cross_layer(m, &qt, &h[t], &format!("select.cross.{l}"));
                }
                qt.remove(0)
            })
            .collect()
    } else {
        h.iter().map(|step| mean_rows(step)).collect()
    };

    let hid = linear(m, &q, "head.hidden");
    let hid: Mat = hid.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let out = linear(m, &hid, "head.out");
    out.iter().map(|r| 1.0 / (1.0 + (-r[0]).exp())).collect()
}
