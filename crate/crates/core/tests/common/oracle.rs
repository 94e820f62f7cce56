//! Straight-line reimplementation of the inference pipeline on plain
//! `Vec<Vec<f64>>` matrices. Nothing here calls into the library: inputs are
//! raw tensors, the image, and the three raw prompt encodings.

use std::collections::BTreeMap;

pub type Mat = Vec<Vec<f64>>;

pub struct OracleInputs {
    /// Every backbone tensor by name.
    pub backbone: BTreeMap<String, Mat>,
    /// Every trainable tensor by name.
    pub params: BTreeMap<String, Mat>,
    /// RGB in [0, 1], `[y][x][c]`.
    pub image: Vec<Vec<[f64; 3]>>,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub patch: usize,
    pub layers: usize,
    pub stages: usize,
    pub heads: usize,
    pub k: usize,
    pub sp_stages: Vec<usize>,
    pub m: usize,
    pub temperature: f64,
    pub raw_normal: Vec<f64>,
    pub raw_abnormal: Vec<f64>,
    pub raw_stateless: Vec<f64>,
}

pub struct OracleOutput {
    pub image_score: f64,
    /// `[y][x]` at input resolution.
    pub heatmap: Mat,
    /// Patch probabilities per stage on the grid.
    pub stage_grids: Vec<Mat>,
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = mm(x, w);
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(&b[0]) {
            *v += bias;
        }
    }
    y
}

fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gamma[0][c] + beta[0][c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn lin(p: &BTreeMap<String, Mat>, prefix: &str, x: &Mat) -> Mat {
    affine(x, &p[&format!("{prefix}.weight")], &p[&format!("{prefix}.bias")])
}

fn block(bb: &BTreeMap<String, Mat>, l: usize, x: &Mat, heads: usize) -> Mat {
    let p = format!("visual.blocks.{l}");
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h = layer_norm(x, &bb[&format!("{p}.ln_1.weight")], &bb[&format!("{p}.ln_1.bias")]);
    let qkv = lin(bb, &format!("{p}.attn.qkv"), &h);
    let mut concat = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        for i in 0..n {
            let q = &qkv[i][hd * dh..(hd + 1) * dh];
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let kj = &qkv[j][d + hd * dh..d + (hd + 1) * dh];
                    q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][hd * dh + c] = (0..n).map(|j| e[j] / z * qkv[j][2 * d + hd * dh + c]).sum();
            }
        }
    }
    let o = lin(bb, &format!("{p}.attn.out"), &concat);
    let x1: Mat = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h = layer_norm(&x1, &bb[&format!("{p}.ln_2.weight")], &bb[&format!("{p}.ln_2.bias")]);
    let h: Mat = lin(bb, &format!("{p}.mlp.fc"), &h)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let h = lin(bb, &format!("{p}.mlp.proj"), &h);
    x1.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

/// 3×3, stride 2, zero padding 1, then ReLU; `x[y][x][c]`.
fn conv(x: &[Vec<Vec<f64>>], w: &Mat, b: &Mat) -> Vec<Vec<Vec<f64>>> {
    let (h, wd, cin) = (x.len(), x[0].len(), x[0][0].len());
    let cout = w[0].len();
    let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
    let mut out = vec![vec![vec![0.0; cout]; ow]; oh];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = b[0][co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[iy as usize][ix as usize][c] * w[(ky * 3 + kx) * cin + c][co];
                        }
                    }
                }
                out[oy][ox][co] = s.max(0.0);
            }
        }
    }
    out
}

fn bilinear(grid: &Mat, size: usize) -> Mat {
    let side = grid.len();
    let coord = |i: usize| i as f64 * (side - 1) as f64 / (size - 1) as f64;
    (0..size)
        .map(|y| {
            (0..size)
                .map(|x| {
                    let (fy, fx) = (coord(y), coord(x));
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(side - 1), (x0 + 1).min(side - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    grid[y0][x0] * (1.0 - ty) * (1.0 - tx)
                        + grid[y0][x1] * (1.0 - ty) * tx
                        + grid[y1][x0] * ty * (1.0 - tx)
                        + grid[y1][x1] * ty * tx
                })
                .collect()
        })
        .collect()
}

pub fn run(inp: &OracleInputs) -> OracleOutput {
    let bb = &inp.backbone;
    let pr = &inp.params;
    let size = inp.image.len();
    let p = inp.patch;
    let side = size / p;
    let n_p = side * side;

    let norm: Vec<Vec<Vec<f64>>> = inp
        .image
        .iter()
        .map(|row| {
            row.iter()
                .map(|px| (0..3).map(|c| (px[c] - inp.pixel_mean[c]) / inp.pixel_std[c]).collect())
                .collect()
        })
        .collect();

    // CNN feature and prompt tokens
    let mut f = norm.clone();
    for i in 1..=3 {
        f = conv(&f, &bb[&format!("cnn.conv{i}.weight")], &bb[&format!("cnn.conv{i}.bias")]);
    }
    let cells = (f.len() * f[0].len()) as f64;
    let c_cnn = f[0][0].len();
    let f_cnn: Vec<f64> = (0..c_cnn)
        .map(|c| f.iter().flat_map(|r| r.iter().map(move |v| v[c])).sum::<f64>() / cells)
        .collect();
    let prompts: Mat = (0..inp.k)
        .map(|i| {
            let pv = lin(pr, &format!("sp.adapter{i}"), &vec![f_cnn.clone()]);
            pv[0].iter().zip(&pr["sp.prompt_tokens"][i]).map(|(a, b)| a + b).collect()
        })
        .collect();

    // image tower
    let mut patches = vec![vec![0.0; 3 * p * p]; n_p];
    for gy in 0..side {
        for gx in 0..side {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        patches[gy * side + gx][c * p * p + py * p + px] = norm[gy * p + py][gx * p + px][c];
                    }
                }
            }
        }
    }
    let emb = mm(&patches, &bb["visual.patch_embed.weight"]);
    let mut x: Mat = std::iter::once(bb["visual.class_embedding"][0].clone()).chain(emb).collect();
    for (i, row) in x.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += bb["visual.positional_embedding"][i][c];
        }
    }
    x = layer_norm(&x, &bb["visual.ln_pre.weight"], &bb["visual.ln_pre.bias"]);
    let per_stage = inp.layers / inp.stages;
    let mut taps = Vec::new();
    for layer in 1..=inp.layers {
        let stage = (layer - 1) / per_stage + 1;
        if layer >= 2 && inp.sp_stages.contains(&stage) {
            let n = x.len();
            for i in 0..inp.k {
                x[n - inp.k + i] = prompts[i].clone();
            }
        }
        x = block(bb, layer - 1, &x, inp.heads);
        if layer % per_stage == 0 {
            taps.push(x.clone());
        }
    }

    // prototypes
    let text = |raw: &Vec<f64>| lin(pr, "adapter.text", &vec![raw.clone()]).remove(0);
    let (f_n, f_a, f_s) = (text(&inp.raw_normal), text(&inp.raw_abnormal), text(&inp.raw_stateless));
    let d = f_s.len();
    let half = inp.m / 2;

    let mut class_probs = Vec::new();
    let mut stage_grids = Vec::new();
    for (k, tap) in taps.iter().enumerate() {
        let stage = k + 1;
        let fv = lin(pr, &format!("adapter.visual.stage{stage}"), tap);
        let mut pooled = fv.clone();
        for r in 0..side {
            for c in 0..side {
                let mut acc = vec![0.0; d];
                let mut count = 0.0;
                for rr in r.saturating_sub(half)..=(r + half).min(side - 1) {
                    for cc in c.saturating_sub(half)..=(c + half).min(side - 1) {
                        for (a, v) in acc.iter_mut().zip(&fv[1 + rr * side + cc]) {
                            *a += v;
                        }
                        count += 1.0;
                    }
                }
                pooled[1 + r * side + c] = acc.into_iter().map(|a| a / count).collect();
            }
        }
        let blk = format!("cmfr.stage{stage}");
        let probs: Vec<f64> = pooled
            .iter()
            .map(|row| {
                let joint: Vec<f64> = row.iter().chain(&f_s).cloned().collect();
                let h: Mat = lin(pr, &format!("{blk}.conv1"), &vec![joint])
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                    .collect();
                let h = lin(pr, &format!("{blk}.conv2"), &h);
                let gate: Mat = vec![h[0].iter().map(|&v| sigmoid(v)).collect()];
                let mixed = lin(pr, &format!("{blk}.linear"), &gate);
                let out: Vec<f64> = (0..d).map(|c| f_s[c] + row[c] * mixed[0][c]).collect();
                let sa = cosine(&out, &f_a) / inp.temperature;
                let sn = cosine(&out, &f_n) / inp.temperature;
                1.0 / (1.0 + (sn - sa).exp())
            })
            .collect();
        class_probs.push(probs[0]);
        stage_grids.push((0..side).map(|r| probs[1 + r * side..1 + (r + 1) * side].to_vec()).collect::<Mat>());
    }

    let fused: Mat = (0..side)
        .map(|r| (0..side).map(|c| stage_grids.iter().map(|g| g[r][c]).sum::<f64>() / stage_grids.len() as f64).collect())
        .collect();
    OracleOutput {
        image_score: *class_probs.last().unwrap(),
        heatmap: bilinear(&fused, size),
        stage_grids,
    }
}
