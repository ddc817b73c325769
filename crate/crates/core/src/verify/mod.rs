//! Self-test suite behind `cotseg verify`: gradient checks, oracle
//! comparisons and round-trips, each reported as one named pass/fail row.

pub mod oracle;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cot::{cot_forward, cot_forward_traced, cot_param_count, CoTConfig, CoTParams};
use crate::error::Result;
use crate::inference::{predict_volume, predict_volume_ordered, SlidingWindowConfig};
use crate::losses::{combined_loss, cross_entropy_loss, dice_loss, evaluate, LossConfig};
use crate::metrics::{dice_score, hd95, BinaryMask};
use crate::nifti::{parse_nifti, read_nifti, write_nifti, NiftiDType, NiftiVolume};
use crate::preprocess::Volume;
use crate::tensor::gradcheck::{check_with, GradCheckReport, STEP};
use crate::tensor::{Fault, Graph, Tensor, Var};
use crate::trainer::cosine_lr;
use crate::unet::{unet_forward, unet_param_count, UNet, UNetConfig, UNetParams};

/// One row of the verification table.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u128,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>, start: Instant) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
            elapsed_ms: start.elapsed().as_millis(),
        }
    }

    fn from_result(name: &str, start: Instant, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail, start),
            Err(e) => Check::new(name, false, format!("error: {e}"), start),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
    pub seed: u64,
    pub metric_pairs: usize,
    pub nifti_volumes: usize,
    pub random_configs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            fault: None,
            seed: 2019,
            metric_pairs: 200,
            nifti_volumes: 50,
            random_configs: 50,
        }
    }
}

pub fn run(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = gradient_checks(opts.fault);
    out.push(cot_reduction_check(opts.seed, 20));
    out.push(metric_oracle_check(opts.seed, opts.metric_pairs));
    out.push(hd95_345_check());
    out.extend(loss_checks(opts.seed));
    out.push(scheduler_check());
    out.push(nifti_roundtrip_check(opts.seed, opts.nifti_volumes));
    out.push(nifti_error_check());
    out.extend(sliding_window_checks(opts.seed));
    out.push(param_accounting_check(opts.seed, opts.random_configs));
    out
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
    let mut s = format!("{:<6} {:<width$} {:>8}  detail\n", "result", "check", "ms");
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        s += &format!("{tag:<6} {:<width$} {:>8}  {}\n", c.name, c.elapsed_ms, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    s += &format!("{} checks, {failed} failed\n", checks.len());
    s
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Weighted sum `sum(y * r)` with fixed random `r`, so every output element
/// gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], max_per_input: Option<usize>, fault: Option<Fault>, build: F) -> Check
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let start = Instant::now();
    let r = check_with(inputs, max_per_input, STEP, fault, build).map(|rep: GradCheckReport| {
        (
            rep.passes(),
            format!(
                "max rel err {:.2e} over {} elements (worst: input {}, element {})",
                rep.max_rel_error, rep.checked, rep.worst.0, rep.worst.1
            ),
        )
    });
    Check::from_result(&format!("gradient/{name}"), start, r)
}

fn one_hot_target(rng: &mut ChaCha8Rng, batch: usize, spatial: [usize; 3]) -> Tensor<f64> {
    let v: usize = spatial.iter().product();
    let labels: Vec<usize> = (0..batch * v).map(|_| rng.random_range(0..4)).collect();
    Tensor::from_fn(&[batch, 4, spatial[0], spatial[1], spatial[2]], |i| {
        let (b, c, x) = (i / (4 * v), (i / v) % 4, i % v);
        f64::from(labels[b * v + x] == c)
    })
}

/// Finite-difference checks for every differentiable op, the CoT block, the
/// losses and a depth-2 U-Net.
pub fn gradient_checks(fault: Option<Fault>) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();

    let x = random_tensor(&mut rng, &[1, 2, 4, 5, 3], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut rng, &[3], -0.5, 0.5);
    out.push(grad_check("conv3d", &[x.clone(), w, b], None, fault, |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        probe(g, y, 1)
    }));
    let w2 = random_tensor(&mut rng, &[2, 2, 3, 3, 3], -0.5, 0.5);
    out.push(grad_check("conv3d (stride 2)", &[x.clone(), w2], None, fault, |g, v| {
        let y = g.conv3d(v[0], v[1], None, 2, 1)?;
        probe(g, y, 2)
    }));
    let wp = random_tensor(&mut rng, &[3, 2, 1, 1, 1], -1.0, 1.0);
    let bp = random_tensor(&mut rng, &[3], -1.0, 1.0);
    out.push(grad_check("pointwise_conv", &[x.clone(), wp, bp], None, fault, |g, v| {
        let y = g.pointwise_conv(v[0], v[1], Some(v[2]))?;
        probe(g, y, 3)
    }));
    out.push(grad_check("upsample_nearest3d", &[x.clone()], None, fault, |g, v| {
        let y = g.upsample_nearest3d(v[0], 2)?;
        probe(g, y, 4)
    }));
    let x2 = random_tensor(&mut rng, &[1, 2, 4, 5, 3], -1.0, 1.0);
    out.push(grad_check("add/mul/scale", &[x.clone(), x2.clone()], None, fault, |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[1])?;
        let y = g.scale(m, -1.7);
        probe(g, y, 5)
    }));
    // keep inputs away from the kink so central differences are valid
    let xr = Tensor::from_fn(&[1, 2, 3, 3, 3], |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    out.push(grad_check("relu", &[xr], None, fault, |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 6)
    }));
    let x3 = random_tensor(&mut rng, &[1, 3, 4, 5, 3], -1.0, 1.0);
    out.push(grad_check("concat_channels", &[x.clone(), x3], None, fault, |g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        probe(g, y, 7)
    }));
    let xs = random_tensor(&mut rng, &[2, 4, 3, 2, 2], -2.0, 2.0);
    out.push(grad_check("softmax_channels", &[xs.clone()], None, fault, |g, v| {
        let y = g.softmax_channels(v[0])?;
        probe(g, y, 8)
    }));
    out.push(grad_check("instance_norm", &[x.clone()], None, fault, |g, v| {
        let y = g.instance_norm(v[0], 1e-5)?;
        probe(g, y, 9)
    }));
    out.push(grad_check("sum", &[x.clone()], None, fault, |g, v| Ok(g.sum(v[0]))));

    let target = one_hot_target(&mut rng, 2, [3, 2, 2]);
    let cfg = LossConfig {
        check_target: true,
        ..LossConfig::default()
    };
    for (name, loss) in [
        ("dice_loss", dice_loss::<f64> as fn(&mut Graph<f64>, Var, &Tensor<f64>, &LossConfig) -> Result<Var>),
        ("cross_entropy_loss", cross_entropy_loss::<f64>),
        ("combined_loss", combined_loss::<f64>),
    ] {
        let (t, c) = (target.clone(), cfg.clone());
        out.push(grad_check(name, &[xs.clone()], None, fault, move |g, v| {
            let p = g.softmax_channels(v[0])?;
            loss(g, p, &t, &c)
        }));
    }

    for normalize in [false, true] {
        let cfg = CoTConfig {
            attention_hidden: 3,
            normalize_attention: normalize,
            ..CoTConfig::new(2)
        };
        let params = CoTParams::<Tensor<f64>>::init(&cfg, &mut rng);
        let mut inputs = vec![random_tensor(&mut rng, &[1, 2, 4, 3, 4], -1.0, 1.0)];
        params.visit("", &mut |_, t| inputs.push(t.clone()));
        let name = if normalize { "cot_block (softmax attention)" } else { "cot_block" };
        out.push(grad_check(name, &inputs, None, fault, move |g, v| {
            let p = CoTParams {
                w_k: v[1],
                w_v: v[2],
                w_q: v[3],
                w_ctx: v[4],
                w_theta: v[5],
                w_delta: v[6],
            };
            let y = cot_forward(g, v[0], &p, &cfg)?;
            probe(g, y, 10)
        }));
    }

    let ucfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        cot_levels: vec![0, 1],
        ..UNetConfig::default()
    };
    let params = UNetParams::<Tensor<f64>>::init(&ucfg, 5).expect("valid config");
    let mut inputs = vec![random_tensor(&mut rng, &[1, 4, 8, 8, 8], -1.0, 1.0)];
    params.visit(&mut |_, t| inputs.push(t.clone()));
    let target = one_hot_target(&mut rng, 1, [8, 8, 8]);
    out.push(grad_check("unet (depth 2)", &inputs, Some(96), fault, move |g, v| {
        let mut it = v[1..].iter().copied();
        let p = params.map(&mut |_| it.next().expect("one var per parameter"));
        let logits = unet_forward(g, v[0], &p, &ucfg)?;
        let probs = g.softmax_channels(logits)?;
        combined_loss(g, probs, &target, &LossConfig::default())
    }));
    out
}

/// Zeroing `W_delta` must make the block output equal `K1` bit for bit.
pub fn cot_reduction_check(seed: u64, configs: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc07);
    let r = (|| -> Result<(bool, String)> {
        for i in 0..configs {
            let c = rng.random_range(1..=4);
            let cfg = CoTConfig {
                kernel: [1, 3, 5][rng.random_range(0..3)],
                attention_hidden: rng.random_range(1..=4),
                ..CoTConfig::new(c)
            };
            let mut params = CoTParams::<Tensor<f64>>::init(&cfg, &mut rng);
            params.w_delta = Tensor::zeros(params.w_delta.shape());
            let shape = [rng.random_range(1..=2), c, rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
            let x = random_tensor(&mut rng, &shape, -2.0, 2.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let p = params.bind(&mut g);
            let tr = cot_forward_traced(&mut g, xv, &p, &cfg)?;
            if g.value(tr.output) != g.value(tr.static_context) {
                return Ok((false, format!("config {i} ({cfg:?}, input {shape:?}): Y != K1")));
            }
        }
        Ok((true, format!("{configs} random configs, Y == K1 exactly")))
    })();
    Check::from_result("cot/zero-attention reduction", start, r)
}

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<bool> {
    let n = dims.iter().product();
    match rng.random_range(0..10) {
        0 => vec![false; n],
        1..=4 => {
            let p = rng.random_range(0.01..0.6);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
        _ => {
            // union of a few boxes, closer to real segmentations
            let mut m = vec![false; n];
            for _ in 0..rng.random_range(1..=3) {
                let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
                let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..dims[a]) + 1);
                for i in lo[0]..hi[0] {
                    for j in lo[1]..hi[1] {
                        for k in lo[2]..hi[2] {
                            m[(i * dims[1] + j) * dims[2] + k] = true;
                        }
                    }
                }
            }
            m
        }
    }
}

/// Dice against the counting oracle (exact) and HD95 against all-pairs
/// surface distances (1e-9) on random 12^3 pairs.
pub fn metric_oracle_check(seed: u64, pairs: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d37);
    let dims = [12, 12, 12];
    let r = (|| -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for i in 0..pairs {
            let (a, b) = (random_mask(&mut rng, dims), random_mask(&mut rng, dims));
            let spacing: [f64; 3] = if i % 2 == 0 {
                [1.0; 3]
            } else {
                std::array::from_fn(|_| rng.random_range(0.5..2.0))
            };
            let (ma, mb) = (BinaryMask::new(dims, a.clone())?, BinaryMask::new(dims, b.clone())?);
            let d = dice_score(&ma, &mb)?;
            let d_ref = oracle::dice_counting(&a, &b);
            if d != d_ref {
                return Ok((false, format!("pair {i}: dice {d} vs counting oracle {d_ref}")));
            }
            let h = hd95(&ma, &mb, spacing)?;
            let h_ref = oracle::hausdorff_brute(&a, &b, dims, spacing, 95.0);
            let ok = if h_ref.is_finite() { (h - h_ref).abs() <= 1e-9 } else { h == h_ref };
            if !ok {
                return Ok((false, format!("pair {i}: hd95 {h} vs all-pairs oracle {h_ref}")));
            }
            if h_ref.is_finite() {
                worst = worst.max((h - h_ref).abs());
            }
        }
        Ok((true, format!("{pairs} pairs; dice exact, hd95 max abs diff {worst:.1e}")))
    })();
    Check::from_result("metrics/oracles", start, r)
}

/// Two single voxels offset by (3, 4, 0) at unit spacing are 5 mm apart.
pub fn hd95_345_check() -> Check {
    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let dims = [8, 8, 8];
        let mut a = vec![false; 512];
        let mut b = vec![false; 512];
        a[0] = true;
        b[(3 * 8 + 4) * 8] = true;
        let h = hd95(&BinaryMask::new(dims, a)?, &BinaryMask::new(dims, b)?, [1.0; 3])?;
        Ok((h == 5.0, format!("hd95 = {h}")))
    })();
    Check::from_result("metrics/3-4-5 case", start, r)
}

/// Loss anchors and the direct-formula oracle.
pub fn loss_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let t = one_hot_target(&mut rng, 1, [4, 4, 4]);
        let u = Tensor::full(t.shape(), 0.25);
        let ce = evaluate(cross_entropy_loss, &u, &t, &cfg)?;
        let perfect = evaluate(dice_loss, &t, &t, &cfg)?;
        let ok = (ce - 4f64.ln()).abs() < 1e-9 && perfect <= 1e-4;
        Ok((ok, format!("uniform CE - ln 4 = {:.1e}; perfect Dice loss = {perfect:.1e}", ce - 4f64.ln())))
    })();
    out.push(Check::from_result("loss/anchors", start, r));

    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let batch = rng.random_range(1..=2);
            let t = one_hot_target(&mut rng, batch, [3, 3, 2]);
            let logits = random_tensor(&mut rng, t.shape(), -3.0, 3.0);
            let mut g = Graph::new();
            let l = g.constant(logits);
            let p = g.softmax_channels(l)?;
            let p = g.value(p).clone();
            let d = evaluate(dice_loss, &p, &t, &cfg)?;
            let c = evaluate(cross_entropy_loss, &p, &t, &cfg)?;
            let d_ref = oracle::dice_loss_direct(p.data(), t.data(), batch, 4, cfg.epsilon);
            let c_ref = oracle::cross_entropy_direct(p.data(), t.data(), batch, 4);
            worst = worst.max((d - d_ref).abs()).max((c - c_ref).abs());
            let (dv, cv) = (d, c);
            for alpha in [0.0, 0.25, 0.5, 0.9, 1.0] {
                let mixed = evaluate(combined_loss, &p, &t, &LossConfig { alpha, ..cfg.clone() })?;
                worst = worst.max((mixed - (alpha * dv + (1.0 - alpha) * cv)).abs());
            }
        }
        Ok((worst < 1e-10, format!("max deviation from direct formulas and alpha-linearity {worst:.1e}")))
    })();
    out.push(Check::from_result("loss/oracle + alpha linearity", start, r));
    out
}

pub fn scheduler_check() -> Check {
    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let (a, b, c) = (cosine_lr(0, 1000, 3e-4)?, cosine_lr(500, 1000, 3e-4)?, cosine_lr(1000, 1000, 3e-4)?);
        Ok((a == 3e-4 && b == 1.5e-4 && c == 0.0, format!("lr(0)={a}, lr(T/2)={b}, lr(T)={c}")))
    })();
    Check::from_result("trainer/cosine anchors", start, r)
}

/// Scratch directory removed on drop.
struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new(tag: &str) -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let p = std::env::temp_dir().join(format!("cotseg-{tag}-{}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&p).map_err(|e| crate::Error::io(&p, e))?;
        Ok(ScratchDir(p))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn random_nifti(rng: &mut ChaCha8Rng) -> NiftiVolume {
    let dtype = NiftiDType::ALL[rng.random_range(0..NiftiDType::ALL.len())];
    let mut dims: Vec<usize> = (0..3).map(|_| rng.random_range(1..=7)).collect();
    if rng.random_bool(0.2) {
        dims.push(4);
    }
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| match dtype {
            NiftiDType::U8 => rng.random_range(0..=255u8) as f64,
            NiftiDType::I8 => rng.random_range(-128..=127i8) as f64,
            NiftiDType::I16 => rng.random_range(i16::MIN..=i16::MAX) as f64,
            NiftiDType::U16 => rng.random_range(0..=u16::MAX) as f64,
            NiftiDType::I32 => rng.random_range(i32::MIN..=i32::MAX) as f64,
            NiftiDType::U32 => rng.random_range(0..=u32::MAX) as f64,
            // keep 64-bit integers exactly representable as f64
            NiftiDType::I64 => rng.random_range(-(1i64 << 52)..(1i64 << 52)) as f64,
            NiftiDType::U64 => rng.random_range(0..(1u64 << 53)) as f64,
            NiftiDType::F32 => rng.random_range(-1e3f32..1e3) as f64,
            NiftiDType::F64 => rng.random_range(-1e6..1e6),
        })
        .collect();
    let spacing = std::array::from_fn(|_| f64::from(rng.random_range(0.25f32..3.0)));
    NiftiVolume::new(dims, dtype, spacing, data).expect("consistent volume")
}

/// Random volumes of every dtype, plain and gzip, through write and read.
pub fn nifti_roundtrip_check(seed: u64, count: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0411);
    let r = (|| -> Result<(bool, String)> {
        let dir = ScratchDir::new("nifti")?;
        for i in 0..count {
            let vol = random_nifti(&mut rng);
            let path = dir.0.join(if i % 2 == 0 { format!("v{i}.nii.gz") } else { format!("v{i}.nii") });
            write_nifti(&vol, &path)?;
            let back = read_nifti(&path)?;
            let same_bits = back.data.len() == vol.data.len()
                && back.data.iter().zip(&vol.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same_bits || back.dims != vol.dims || back.dtype != vol.dtype || back.spacing != vol.spacing {
                return Ok((false, format!("volume {i} ({:?} {:?}) did not round-trip", vol.dtype, vol.dims)));
            }
        }
        Ok((true, format!("{count} volumes, all dtypes, gzip on/off, bit-identical")))
    })();
    Check::from_result("nifti/round-trip", start, r)
}

/// Malformed magic, datatype and payload each produce their named error.
pub fn nifti_error_check() -> Check {
    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let vol = NiftiVolume::new(vec![2, 2, 2], NiftiDType::F32, [1.0; 3], vec![1.0; 8])?;
        let good = crate::nifti::encode_nifti(&vol)?;
        let mut bad_magic = good.clone();
        bad_magic[344] = b'x';
        let mut bad_dtype = good.clone();
        bad_dtype[70..72].copy_from_slice(&7i16.to_le_bytes());
        let truncated = &good[..good.len() - 3];
        let fields = [
            parse_nifti(&bad_magic).err().map(|e| e.field()),
            parse_nifti(&bad_dtype).err().map(|e| e.field()),
            parse_nifti(truncated).err().map(|e| e.field()),
        ];
        let ok = fields == [Some("magic"), Some("datatype"), Some("truncated")];
        Ok((ok, format!("errors named {fields:?}")))
    })();
    Check::from_result("nifti/malformed input", start, r)
}

/// Single-window equivalence, window-order invariance and the coverage oracle.
pub fn sliding_window_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5117);
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        cot_levels: vec![0, 1],
        ..UNetConfig::default()
    };

    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let model = UNet::<f64>::new(cfg.clone(), seed)?;
        let dims = [8, 8, 8];
        let vol = random_volume(&mut rng, dims)?;
        let sw = SlidingWindowConfig {
            patch: dims,
            overlap: 0.5,
        };
        let windowed = predict_volume(&vol, &model, &sw)?;
        let direct = model.predict_probs(&vol.to_tensor::<f64>())?;
        let same = windowed.data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((same && windowed.len() == direct.len(), "one window == direct forward, bit-identical".to_string()))
    })();
    out.push(Check::from_result("inference/single-window equivalence", start, r));

    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let model = UNet::<f64>::new(cfg.clone(), seed + 1)?;
        let vol = random_volume(&mut rng, [12, 10, 9])?;
        let sw = SlidingWindowConfig {
            patch: [8; 3],
            overlap: 0.5,
        };
        let a = predict_volume(&vol, &model, &sw)?;
        let n = sw.windows(sw.padded_dims(vol.dims)).len();
        let reversed: Vec<usize> = (0..n).rev().collect();
        let b = predict_volume_ordered(&vol, &model, &sw, Some(&reversed))?;
        let sums_ok = (0..vol.voxels()).all(|v| {
            let s: f64 = (0..4).map(|c| a.data()[c * vol.voxels() + v]).sum();
            (s - 1.0).abs() < 1e-5
        });
        Ok((a == b && sums_ok, format!("{n} windows; forward vs reversed order identical, simplex per voxel")))
    })();
    out.push(Check::from_result("inference/window order", start, r));

    let start = Instant::now();
    let r = (|| -> Result<(bool, String)> {
        let mut cases = 0;
        for patch in [[4, 4, 4], [8, 4, 6], [6, 6, 2]] {
            for overlap in [0.0, 0.25, 0.5, 0.75] {
                let sw = SlidingWindowConfig { patch, overlap };
                for dims in [patch, [patch[0] * 3 / 2, patch[1] * 3 / 2, patch[2] * 3 / 2], [13, 9, 11]] {
                    let dims: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
                    let origins = std::array::from_fn(|a| sw.origins(a, dims[a]));
                    let fast = sw.coverage(dims);
                    let slow = oracle::coverage_brute(dims, patch, &origins);
                    if fast != slow || fast.contains(&0) {
                        return Ok((false, format!("patch {patch:?}, overlap {overlap}, dims {dims:?}")));
                    }
                    cases += 1;
                }
            }
        }
        let small = SlidingWindowConfig::desk().coverage([5, 40, 7]);
        let ok = !small.contains(&0);
        Ok((ok, format!("{cases} grids match the brute-force counts; every voxel covered")))
    })();
    out.push(Check::from_result("inference/coverage oracle", start, r));
    out
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Result<Volume> {
    let n = dims.iter().product();
    let channels = std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
    Volume::new("random", dims, [1.0; 3], channels)
}

/// Closed-form counts against allocated sizes, plus the full-scale range.
pub fn param_accounting_check(seed: u64, configs: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7a);
    let r = (|| -> Result<(bool, String)> {
        for i in 0..configs {
            let depth = rng.random_range(2..=4);
            let cfg = UNetConfig {
                in_channels: rng.random_range(1..=4),
                num_classes: rng.random_range(1..=4),
                depth,
                base_channels: rng.random_range(1..=6),
                cot_levels: (0..depth).filter(|_| rng.random_bool(0.5)).collect(),
                cot_decoder_levels: (0..depth - 1).filter(|_| rng.random_bool(0.3)).collect(),
                cot_kernel: [1, 3, 5][rng.random_range(0..3)],
                cot_hidden_divisor: rng.random_range(1..=4),
                replace_conv_with_cot: rng.random_bool(0.3),
                ..UNetConfig::default()
            };
            let alloc = UNetParams::<Tensor<f32>>::init(&cfg, 0)?.numel();
            if alloc != unet_param_count(&cfg) {
                return Ok((false, format!("config {i}: closed form {} vs allocated {alloc}", unet_param_count(&cfg))));
            }
            let cot = cfg.cot_config(cfg.base_channels);
            let mut trng = ChaCha8Rng::seed_from_u64(i as u64);
            if CoTParams::<Tensor<f32>>::init(&cot, &mut trng).numel() != cot_param_count(&cot) {
                return Ok((false, format!("config {i}: cot count mismatch for {cot:?}")));
            }
        }
        let full = unet_param_count(&UNetConfig::full());
        let baseline = unet_param_count(&UNetConfig::full().without_cot());
        let ok = (1_000_000..=3_000_000).contains(&full);
        Ok((ok, format!("{configs} configs exact; full preset {full} params (baseline {baseline})")))
    })();
    Check::from_result("params/accounting", start, r)
}
