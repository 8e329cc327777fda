//! Check routines shared by the per-module suites and the acceptance
//! harness. Each returns `Err(reason)` on the first violation.

#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotswap::data::{load_manifest, ImageBank};
use slotswap::losses::{
    attribute_consistency_loss, back_transfer_loss, discriminator_loss, distance, generation_loss,
    generation_loss_tensor, transfer_loss, DistMetric, LossWeights,
};
use slotswap::nets::{build_models, Mode, ModelParams, Network, NetworkConfig, PROB_EPS};
use slotswap::slots::{
    attribute_cycle_in, back_translate_in, encode_code, generate_code, join_code, multiplex_translate,
    reconstruct, split_code, tensors_identical, transfer_domain, transfer_instance, AverageVectorRegistry, Edit,
    EditSource, SlotCode, UpdateMode,
};
use slotswap::train::{
    checkpoint_path, latest_checkpoint, load_train_state, read_metrics, run_training, save_checkpoint,
    train_iteration, train_step, TrainConfig, TrainMode, TrainState, METRICS_FILE,
};
use slotswap::{build_layout, AttributeSchema, Error, SlotLayout};

use super::{micro_dataset, micro_models, micro_network, micro_train_config, random_images, to_vec};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- slot algebra

pub fn random_schema(n: usize) -> AttributeSchema {
    let names: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
    let values = ["x", "y", "z"];
    let pairs: Vec<(&str, &[&str])> = names.iter().map(|s| (s.as_str(), &values[..])).collect();
    AttributeSchema::from_pairs(&pairs).unwrap()
}

fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let count: usize = dims.iter().product();
    let v: Vec<f64> = (0..count).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub struct AlgebraCase {
    pub layout: SlotLayout,
    pub code: SlotCode,
    pub a: usize,
    pub b: usize,
    pub s1: Tensor,
    pub s2: Tensor,
    pub sb: Tensor,
    pub latent: Tensor,
}

pub fn algebra_case(n: usize, uniq: usize, per: usize, side: usize, batch: usize, seed: u64) -> AlgebraCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = random_schema(n);
    let layout = build_layout(&schema, (side, side), uniq, per).unwrap();
    let latent = random_tensor(&[batch, layout.total_channels(), side, side], &mut rng);
    let code = split_code(&latent, &layout).unwrap();
    let a = rng.gen_range(0..n);
    let b = if n > 1 { (a + rng.gen_range(1..n)) % n } else { a };
    let shape = layout.slot_shape(a, batch).unwrap();
    let s1 = random_tensor(&shape, &mut rng);
    let s2 = random_tensor(&shape, &mut rng);
    let sb = random_tensor(&layout.slot_shape(b, batch).unwrap(), &mut rng);
    AlgebraCase {
        layout,
        code,
        a,
        b,
        s1,
        s2,
        sb,
        latent,
    }
}

pub fn check_split_join(c: &AlgebraCase) -> Check {
    let joined = join_code(&c.code).map_err(e)?;
    ensure!(tensors_identical(&joined, &c.latent).map_err(e)?, "join(split(z)) != z");
    let again = split_code(&joined, &c.layout).map_err(e)?;
    ensure!(again.exact_eq(&c.code).map_err(e)?, "split(join(code)) != code");
    Ok(())
}

pub fn check_replace_identity(c: &AlgebraCase) -> Check {
    let same = c.code.replace_slot(c.a, c.code.slot(c.a).map_err(e)?).map_err(e)?;
    ensure!(same.exact_eq(&c.code).map_err(e)?, "replacing a slot with itself changed the code");
    let edited = c.code.replace_slot(c.a, &c.s1).map_err(e)?;
    ensure!(
        tensors_identical(edited.slot(c.a).map_err(e)?, &c.s1).map_err(e)?,
        "replaced slot does not hold the new value"
    );
    for k in 0..c.layout.n() {
        if k != c.a {
            ensure!(
                tensors_identical(edited.slot(k).map_err(e)?, c.code.slot(k).map_err(e)?).map_err(e)?,
                "replacing slot {} touched slot {k}",
                c.a
            );
        }
    }
    ensure!(
        tensors_identical(edited.uniqueness(), c.code.uniqueness()).map_err(e)?,
        "replacing a slot touched the uniqueness code"
    );
    Ok(())
}

pub fn check_last_write_wins(c: &AlgebraCase) -> Check {
    let twice = c
        .code
        .replace_slot(c.a, &c.s1)
        .and_then(|x| x.replace_slot(c.a, &c.s2))
        .map_err(e)?;
    let once = c.code.replace_slot(c.a, &c.s2).map_err(e)?;
    ensure!(twice.exact_eq(&once).map_err(e)?, "second write to a slot did not win");
    Ok(())
}

pub fn check_disjoint_commute(c: &AlgebraCase) -> Check {
    if c.a == c.b {
        return Ok(());
    }
    let ab = c
        .code
        .replace_slot(c.a, &c.s1)
        .and_then(|x| x.replace_slot(c.b, &c.sb))
        .map_err(e)?;
    let ba = c
        .code
        .replace_slot(c.b, &c.sb)
        .and_then(|x| x.replace_slot(c.a, &c.s1))
        .map_err(e)?;
    ensure!(ab.exact_eq(&ba).map_err(e)?, "edits of slots {} and {} do not commute", c.a, c.b);
    Ok(())
}

/// Multiplex output must not depend on the order edits are listed in.
pub fn check_multiplex_order(seed: u64) -> Check {
    let (schema, models) = micro_models(DType::F64, seed);
    let reg = super::filled_registry(&schema, &models, seed);
    let x = random_images(2, 16, DType::F64, seed + 100);
    let r = random_images(1, 16, DType::F64, seed + 200);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edits = vec![
        Edit {
            attr: 0,
            source: EditSource::Value(rng.gen_range(0..2)),
        },
        Edit {
            attr: 1,
            source: EditSource::Reference(r),
        },
        Edit {
            attr: 2,
            source: EditSource::Value(rng.gen_range(0..2)),
        },
    ];
    let base = multiplex_translate(&models, &reg, &x, &edits).map_err(e)?;
    for perm in [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]] {
        let reordered: Vec<Edit> = perm.iter().map(|&i| edits[i].clone()).collect();
        let out = multiplex_translate(&models, &reg, &x, &reordered).map_err(e)?;
        ensure!(tensors_identical(&out, &base).map_err(e)?, "edit order {perm:?} changed the output");
    }
    let dup = vec![edits[0].clone(), edits[0].clone()];
    ensure!(
        matches!(multiplex_translate(&models, &reg, &x, &dup), Err(Error::Validation(_))),
        "duplicate edits were accepted"
    );
    Ok(())
}

// ---------------------------------------------------------------- losses

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn oracle_log(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

pub fn oracle_transfer(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in p {
        s -= oracle_log(x);
    }
    s / p.len() as f64
}

pub fn oracle_discriminator(fake: &[f64], real: &[f64]) -> f64 {
    let mut a = 0.0;
    for &x in fake {
        a -= oracle_log(1.0 - x);
    }
    let mut b = 0.0;
    for &x in real {
        b -= oracle_log(x);
    }
    a / fake.len() as f64 + b / real.len() as f64
}

pub fn oracle_distance(a: &[f64], b: &[f64], metric: DistMetric) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]).abs();
        s += match metric {
            DistMetric::L1 => d,
            DistMetric::L2 => d * d,
            DistMetric::Huber { delta } => {
                if d <= delta {
                    0.5 * d * d
                } else {
                    delta * (d - 0.5 * delta)
                }
            }
        };
    }
    s / a.len() as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn t1(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

/// Every loss against its scalar-loop oracle on `cases` random micro-batches.
pub fn check_loss_oracles(cases: usize, seed: u64, tol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..9);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-9..1.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0 - 1e-9)).collect();
        let got = scalar(&transfer_loss(&t1(&p)).map_err(e)?);
        ensure!(close(got, oracle_transfer(&p), tol), "case {case}: transfer {got} vs {}", oracle_transfer(&p));
        let got = scalar(&discriminator_loss(&t1(&q), &t1(&p)).map_err(e)?);
        let want = oracle_discriminator(&q, &p);
        ensure!(close(got, want, tol), "case {case}: discriminator {got} vs {want}");

        let side = rng.gen_range(1..5);
        let dims = [n, 3, side, side];
        let a = random_tensor(&dims, &mut rng);
        let b = random_tensor(&dims, &mut rng);
        let (av, bv) = (to_vec(&a), to_vec(&b));
        let delta = rng.gen_range(0.1..2.0);
        for metric in [DistMetric::L1, DistMetric::L2, DistMetric::Huber { delta }] {
            let want = oracle_distance(&av, &bv, metric);
            let back = scalar(&back_transfer_loss(&a, &b, metric).map_err(e)?);
            let attr = scalar(&attribute_consistency_loss(&a, &b, metric).map_err(e)?);
            ensure!(close(back, want, tol), "case {case}: back {metric:?} {back} vs {want}");
            ensure!(close(attr, want, tol), "case {case}: attr {metric:?} {attr} vs {want}");
        }

        let (l1, l2, l3) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
        let w = LossWeights::new(l1, l2, l3).map_err(e)?;
        let (x, y, z) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
        let want = l1 * x + l2 * y + l3 * z;
        let got = generation_loss(x, y, z, &w).map_err(e)?;
        ensure!(close(got, want, tol), "case {case}: generation {got} vs {want}");
        let got_t = scalar(&generation_loss_tensor(&t1(&[x]).sum_all().unwrap(), &t1(&[y]).sum_all().unwrap(), Some(&t1(&[z]).sum_all().unwrap()), &w).map_err(e)?);
        ensure!(close(got_t, want, tol), "case {case}: generation tensor {got_t} vs {want}");
    }
    Ok(())
}

/// Analytic gradient of `f` at `x` against central differences.
fn grad_check(x: &[f64], dims: &[usize], f: impl Fn(&Tensor) -> Tensor, h: f64, rtol: f64, what: &str) -> Check {
    let var = Var::from_tensor(&Tensor::from_vec(x.to_vec(), dims, &Device::Cpu).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().map_err(e)?;
    let g = grads
        .get(var.as_tensor())
        .map(to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..x.len() {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += h;
        down[i] -= h;
        let fu = scalar(&f(&Tensor::from_vec(up, dims, &Device::Cpu).unwrap()));
        let fd = scalar(&f(&Tensor::from_vec(down, dims, &Device::Cpu).unwrap()));
        let num = (fu - fd) / (2.0 * h);
        let tol = rtol * g[i].abs().max(num.abs()) + 1e-8 * scale.max(1e-12);
        ensure!((g[i] - num).abs() <= tol, "{what}: d/dx[{i}] analytic {} vs numeric {num}", g[i]);
    }
    Ok(())
}

/// Gradients of every loss against central finite differences.
pub fn check_loss_gradients(cases: usize, seed: u64, rtol: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    for case in 0..cases {
        let n = rng.gen_range(1..6);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        grad_check(&p, &[n], |t| transfer_loss(t).unwrap(), h, rtol, &format!("case {case} transfer"))?;
        let qt = t1(&q);
        grad_check(&p, &[n], |t| discriminator_loss(t, &qt).unwrap(), h, rtol, &format!("case {case} dis/fake"))?;
        let pt = t1(&p);
        grad_check(&q, &[n], |t| discriminator_loss(&pt, t).unwrap(), h, rtol, &format!("case {case} dis/real"))?;

        // keep differences away from the kinks of |d| and of Huber at delta
        let delta = 0.7;
        let dims = [n, 3, 2, 2];
        let count = n * 12;
        let b: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = b
            .iter()
            .map(|v| {
                let mag = match rng.gen_range(0..2) {
                    0 => rng.gen_range(0.05..0.6),
                    _ => rng.gen_range(0.8..1.5),
                };
                v + if rng.gen() { mag } else { -mag }
            })
            .collect();
        let bt = Tensor::from_vec(b, &dims[..], &Device::Cpu).unwrap();
        for metric in [DistMetric::L1, DistMetric::L2, DistMetric::Huber { delta }] {
            grad_check(&a, &dims, |t| back_transfer_loss(t, &bt, metric).unwrap(), h, rtol, &format!("case {case} back {metric:?}"))?;
            grad_check(&a, &dims, |t| attribute_consistency_loss(t, &bt, metric).unwrap(), h, rtol, &format!("case {case} attr {metric:?}"))?;
        }
        let w = LossWeights::new(rng.gen_range(0.1..2.0), rng.gen_range(0.1..20.0), rng.gen_range(0.1..20.0)).map_err(e)?;
        let parts = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        grad_check(
            &parts,
            &[3],
            |t| {
                let s = |i| t.narrow(0, i, 1).unwrap().sum_all().unwrap();
                generation_loss_tensor(&s(0), &s(1), Some(&s(2)), &w).unwrap()
            },
            h,
            rtol,
            &format!("case {case} generation"),
        )?;
    }
    let _ = distance;
    Ok(())
}

// ---------------------------------------------------------------- networks

pub fn check_shapes(size: usize, base: usize) -> Check {
    let schema = AttributeSchema::sprites();
    let cfg = NetworkConfig {
        input_size: size,
        base_channels: base,
        uniqueness_channels: base * 2,
        attribute_channels: base,
        discriminator_base_channels: base,
        ..NetworkConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64 * 1000 + base as u64);
    let models = build_models(&cfg, &schema, &mut rng, DType::F32, &Device::Cpu).map_err(e)?;
    ensure!(
        models.param_count() == cfg.param_count(&schema),
        "{size}/{base}: {} parameters built, {} predicted",
        models.param_count(),
        cfg.param_count(&schema)
    );
    let layout = models.layout().clone();
    let x = random_images(1, size, DType::F32, 1);
    let z = models.encode(&x, Mode::Eval).map_err(e)?;
    let want_z = [1, layout.total_channels(), size / 4, size / 4];
    ensure!(z.dims() == want_z, "{size}/{base}: latent {:?}, want {want_z:?}", z.dims());
    let y = models.generate(&z, Mode::Eval).map_err(e)?;
    ensure!(y.dims() == [1, 3, size, size], "{size}/{base}: G(E(x)) is {:?}", y.dims());
    let z2 = models.encode(&y, Mode::Eval).map_err(e)?;
    ensure!(z2.dims() == want_z, "{size}/{base}: E(G(z)) is {:?}", z2.dims());
    let p = models.discriminate(schema.m() - 1, &x, Mode::Eval).map_err(e)?;
    ensure!(p.dims() == [1], "{size}/{base}: discriminator output {:?}", p.dims());
    Ok(())
}

pub fn check_output_ranges(seed: u64) -> Check {
    let (schema, models) = micro_models(DType::F64, seed);
    let layout = models.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for scale in [1.0, 100.0, 1e4] {
        let z = (random_tensor(&[3, layout.total_channels(), 4, 4], &mut rng) * scale).unwrap();
        let y = to_vec(&models.generate(&z, Mode::Eval).map_err(e)?);
        ensure!(y.iter().all(|v| (-1.0..=1.0).contains(v)), "generator output left [-1, 1] at scale {scale}");
        let x = (random_tensor(&[3, 3, 16, 16], &mut rng) * scale).unwrap();
        for k in 0..schema.m() {
            let p = to_vec(&models.discriminate(k, &x, Mode::Eval).map_err(e)?);
            ensure!(
                p.iter().all(|v| (PROB_EPS..=1.0 - PROB_EPS).contains(v) && v.is_finite()),
                "discriminator {k} output {p:?} outside the clamped unit interval at scale {scale}"
            );
        }
    }
    Ok(())
}

/// Full generator objective for one value on the micro models.
pub fn micro_objective(models: &ModelParams, x_src: &Tensor, x_ref: &Tensor, key: usize, attr: usize) -> Tensor {
    let z_src = encode_code(models, x_src, Mode::Train).unwrap();
    let z_ref = encode_code(models, x_ref, Mode::Train).unwrap();
    let edited = z_src.replace_slot(attr, z_ref.slot(attr).unwrap()).unwrap();
    let x_trans = generate_code(models, &edited, Mode::Train).unwrap();
    let l_t = transfer_loss(&models.discriminate(key, &x_trans, Mode::Train).unwrap()).unwrap();
    let x_back = back_translate_in(models, &x_trans, &z_src, &[attr], Mode::Train).unwrap();
    let l_b = back_transfer_loss(x_src, &x_back, DistMetric::L2).unwrap();
    let x_attr = attribute_cycle_in(models, &x_trans, &z_ref, attr, Mode::Train).unwrap();
    let l_a = attribute_consistency_loss(&x_attr, x_ref, DistMetric::L2).unwrap();
    let l_d = discriminator_loss(&models.discriminate(key, &x_trans, Mode::Train).unwrap(), &models.discriminate(key, x_ref, Mode::Train).unwrap()).unwrap();
    let w = LossWeights::new(1.0, 10.0, 10.0).unwrap();
    (generation_loss_tensor(&l_t, &l_b, Some(&l_a), &w).unwrap() + l_d).unwrap()
}

/// Parameter gradients of the whole objective against central differences
/// (float64 micro network; a few entries of every parameter tensor).
pub fn check_network_gradients(seed: u64, rtol: f64) -> Check {
    let (schema, models) = micro_models(DType::F64, seed);
    // larger weights than the default init so every layer carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, var) in models.named_params() {
        let dims = var.dims().to_vec();
        let t = random_tensor(&dims, &mut rng);
        var.set(&(t * 0.3).unwrap()).unwrap();
    }
    let x_src = random_images(2, 16, DType::F64, seed + 2);
    let x_ref = random_images(2, 16, DType::F64, seed + 3);
    let key = schema.value_index("color", "blue").unwrap();
    let f = |m: &ModelParams| micro_objective(m, &x_src, &x_ref, key.global, key.attr);
    let objective = f(&models);
    // rounding noise of a central difference is about eps * |f| / h
    let atol = 1e-7 * (1.0 + scalar(&objective).abs());
    let grads = objective.backward().map_err(e)?;
    let h = 1e-6;
    let mut checked = 0;
    for (name, var) in models.named_params() {
        let net = Network::of(&name).unwrap();
        if let Network::Discriminator(k) = net {
            if k != key.global {
                ensure!(grads.get(var.as_tensor()).is_none(), "unused discriminator {name} received a gradient");
                continue;
            }
        }
        let g = grads.get(var.as_tensor()).map(to_vec).ok_or(format!("no gradient for {name}"))?;
        let base = to_vec(var.as_tensor());
        let picks = [0, base.len() / 2, base.len() - 1];
        for &i in &picks {
            let set = |v: f64| {
                let mut b = base.clone();
                b[i] = v;
                var.set(&Tensor::from_vec(b, var.dims(), &Device::Cpu).unwrap()).unwrap();
            };
            // a ReLU kink inside [x - h, x + h] spoils a step size, so
            // agreement at any of three counts
            let mut nums = Vec::new();
            for step in [h, h / 10.0, h / 100.0] {
                set(base[i] + step);
                let up = scalar(&f(&models));
                set(base[i] - step);
                let down = scalar(&f(&models));
                set(base[i]);
                nums.push((up - down) / (2.0 * step));
            }
            let ok = nums
                .iter()
                .any(|num| (g[i] - num).abs() <= rtol * g[i].abs().max(num.abs()) + atol);
            ensure!(ok, "{name}[{i}]: analytic {} vs numeric {nums:?}", g[i]);
            checked += 1;
        }
    }
    ensure!(checked > 50, "only {checked} parameters checked");
    Ok(())
}

// ---------------------------------------------------------------- trainer

pub struct MicroRun {
    pub dir: tempfile::TempDir,
    pub data: std::path::PathBuf,
}

pub fn micro_run(count: usize) -> MicroRun {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    micro_dataset(&data, count);
    MicroRun { dir, data }
}

fn state_for(cfg: &TrainConfig, data: &Path) -> (TrainState, slotswap::data::DatasetManifest, ImageBank) {
    let manifest = load_manifest(data).unwrap();
    let state = TrainState::new(cfg, manifest.schema(), &Device::Cpu).unwrap();
    let bank = ImageBank::load(&manifest, cfg.precision.dtype(), &Device::Cpu).unwrap();
    (state, manifest, bank)
}

fn network_prints(models: &ModelParams, m: usize) -> Vec<String> {
    let mut v = vec![
        models.fingerprint_of(|n| n == Network::Encoder).unwrap(),
        models.fingerprint_of(|n| n == Network::Generator).unwrap(),
    ];
    for k in 0..m {
        v.push(models.fingerprint_of(|n| n == Network::Discriminator(k)).unwrap());
    }
    v
}

/// A step for value v changes E, G and D_v and nothing else.
pub fn check_update_isolation(run: &MicroRun) -> Check {
    let (mut state, manifest, bank) = state_for(&micro_train_config(1), &run.data);
    let m = state.schema.m();
    for v in state.schema.all_values().collect::<Vec<_>>() {
        let before = network_prints(&state.models, m);
        train_step(&mut state, &manifest, &bank, v).map_err(e)?;
        let after = network_prints(&state.models, m);
        ensure!(before[0] != after[0], "encoder unchanged by step on value {}", v.global);
        ensure!(before[1] != after[1], "generator unchanged by step on value {}", v.global);
        for k in 0..m {
            let changed = before[2 + k] != after[2 + k];
            ensure!(changed == (k == v.global), "discriminator {k} changed={changed} after step on value {}", v.global);
        }
    }
    Ok(())
}

/// The discriminator loss on a detached translation sends no gradient into
/// E or G; checked both independently and through the trainer's trace.
pub fn check_detachment(run: &MicroRun) -> Check {
    let (mut state, manifest, bank) = state_for(&micro_train_config(1), &run.data);
    let models = &state.models;
    let x = bank.batch(&[0, 1]).map_err(e)?;
    let r = bank.batch(&[2, 3]).map_err(e)?;
    let z = encode_code(models, &x, Mode::Train).map_err(e)?;
    let zr = encode_code(models, &r, Mode::Train).map_err(e)?;
    let x_trans = generate_code(models, &z.replace_slot(1, zr.slot(1).map_err(e)?).map_err(e)?, Mode::Train).map_err(e)?;
    let l = discriminator_loss(
        &models.discriminate(3, &x_trans.detach(), Mode::Train).map_err(e)?,
        &models.discriminate(3, &r, Mode::Train).map_err(e)?,
    )
    .map_err(e)?;
    let grads = l.backward().map_err(e)?;
    for (name, var) in models.named_params() {
        let net = Network::of(&name).unwrap();
        let has = grads.get(var.as_tensor()).is_some();
        match net {
            Network::Encoder | Network::Generator => ensure!(!has, "{name} received a discriminator gradient"),
            Network::Discriminator(3) => ensure!(has, "{name} received no gradient"),
            Network::Discriminator(_) => ensure!(!has, "{name} received a gradient"),
        }
    }
    // the attached version does reach E and G, so the check above has teeth
    let attached = transfer_loss(&models.discriminate(3, &x_trans, Mode::Train).map_err(e)?).map_err(e)?;
    let g2 = attached.backward().map_err(e)?;
    ensure!(
        models.params_of(Network::Generator).iter().any(|v| g2.get(v.as_tensor()).is_some()),
        "attached loss did not reach the generator"
    );
    for (_, trace) in train_iteration(&mut state, &manifest, &bank).map_err(e)? {
        ensure!(!trace.discriminator_touched_eg, "trainer's discriminator update touched E/G");
    }
    Ok(())
}

fn metrics_bytes(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(METRICS_FILE)).unwrap()
}

/// Same seed, same bytes; different seed, different stream.
pub fn check_seed_determinism(run: &MicroRun) -> Check {
    let cfg = micro_train_config(3);
    let a = run.dir.path().join("det_a");
    let b = run.dir.path().join("det_b");
    let c = run.dir.path().join("det_c");
    let manifest = load_manifest(&run.data).map_err(e)?;
    run_training(&cfg, &manifest, &a, false, &Device::Cpu).map_err(e)?;
    run_training(&cfg, &manifest, &b, false, &Device::Cpu).map_err(e)?;
    let mut other = cfg.clone();
    other.seed += 1;
    run_training(&other, &manifest, &c, false, &Device::Cpu).map_err(e)?;
    let (ma, mb, mc) = (metrics_bytes(&a), metrics_bytes(&b), metrics_bytes(&c));
    ensure!(!ma.is_empty(), "no metrics written");
    ensure!(ma == mb, "two runs with one seed wrote different metrics");
    ensure!(ma != mc, "different seeds wrote identical metrics");
    let recs = read_metrics(&a.join(METRICS_FILE)).map_err(e)?;
    ensure!(recs.len() == 3 * manifest.schema().m(), "{} metric records for 3 iterations", recs.len());
    Ok(())
}

/// Interrupt at k, resume to T: metrics and weights match an uninterrupted run.
pub fn check_resume(run: &MicroRun, aug: f64, mode: TrainMode) -> Check {
    let mut cfg = micro_train_config(4);
    cfg.multiplex_augment_prob = aug;
    cfg.mode = mode;
    let manifest = load_manifest(&run.data).map_err(e)?;
    let tag = format!("{aug}_{mode:?}");
    let full = run.dir.path().join(format!("full_{tag}"));
    let part = run.dir.path().join(format!("part_{tag}"));
    run_training(&cfg, &manifest, &full, false, &Device::Cpu).map_err(e)?;
    let mut short = cfg.clone();
    short.iterations = 2;
    run_training(&short, &manifest, &part, false, &Device::Cpu).map_err(e)?;
    // an extra line past the checkpoint, as if the process died mid-iteration
    let mut partial = metrics_bytes(&part);
    partial.extend_from_slice(br#"{"iter":3,"value_key":0,"transfer":0.0,"back":0.0,"attr":0.0,"dis":0.0}"#);
    partial.push(b'\n');
    std::fs::write(part.join(METRICS_FILE), partial).unwrap();
    let summary = run_training(&cfg, &manifest, &part, true, &Device::Cpu).map_err(e)?;
    ensure!(summary.start_iteration == 2, "resumed from {}", summary.start_iteration);
    ensure!(metrics_bytes(&full) == metrics_bytes(&part), "resumed metrics differ from the uninterrupted run");
    let a = load_train_state(&checkpoint_path(&full, 4), &Device::Cpu).map_err(e)?;
    let b = load_train_state(&checkpoint_path(&part, 4), &Device::Cpu).map_err(e)?;
    ensure!(a.models.fingerprint().map_err(e)? == b.models.fingerprint().map_err(e)?, "resumed weights differ");
    ensure!(a.rng == b.rng, "resumed rng state differs");
    ensure!(a.stats == b.stats, "resumed counters differ");
    Ok(())
}

pub fn check_zero_iterations(run: &MicroRun) -> Check {
    let out = run.dir.path().join("zero");
    let manifest = load_manifest(&run.data).map_err(e)?;
    run_training(&micro_train_config(0), &manifest, &out, false, &Device::Cpu).map_err(e)?;
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|d| d.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    ensure!(names == ["ckpt_0.bin", "latest", "metrics.jsonl"], "files after 0 iterations: {names:?}");
    ensure!(metrics_bytes(&out).is_empty(), "metrics written for 0 iterations");
    Ok(())
}

pub fn check_zero_lr(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(1);
    cfg.generator_optimizer.lr = 0.0;
    cfg.discriminator_optimizer.lr = 0.0;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    let before = state.models.fingerprint().map_err(e)?;
    let reports = train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    ensure!(state.models.fingerprint().map_err(e)? == before, "zero learning rate changed the weights");
    ensure!(reports.len() == state.schema.m(), "{} reports for m = {}", reports.len(), state.schema.m());
    ensure!(
        reports.iter().all(|(r, _)| r.is_finite() && r.transfer > 0.0 && r.back > 0.0 && r.discriminator > 0.0),
        "losses not reported"
    );
    Ok(())
}

/// Only D trains (E/G frozen) on a two-image domain: its loss goes down.
pub fn check_discriminator_learns(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(1);
    cfg.generator_optimizer.lr = 0.0;
    cfg.discriminator_optimizer.lr = 2e-3;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    let v = state.schema.value_index("color", "red").map_err(e)?;
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut state, &manifest, &bank, v).map_err(e)?.0.discriminator);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    ensure!(tail < head, "discriminator loss did not decrease: {head:.4} -> {tail:.4}");
    Ok(())
}

/// Domain mode: the transfer slot at step t is the minibatch mean of step
/// t's references, and the attribute cycle never runs.
pub fn check_domain_mode(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(1);
    cfg.mode = TrainMode::Domain;
    cfg.weights = LossWeights::domain_default();
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    for _ in 0..2 {
        for (report, trace) in train_iteration(&mut state, &manifest, &bank).map_err(e)? {
            ensure!(!trace.attribute_cycle_evaluated, "attribute cycle evaluated in domain mode");
            ensure!(report.attr == 0.0, "attribute loss {} reported in domain mode", report.attr);
            let live = state.live_registry.mean(trace.value).ok_or("live registry empty")?;
            let used = trace.target_slot.squeeze(0).map_err(e)?;
            ensure!(tensors_identical(&used, live).map_err(e)?, "transfer slot is not the step's minibatch mean");
        }
    }
    ensure!(state.stats.attribute_cycle_calls == 0, "{} attribute-cycle calls", state.stats.attribute_cycle_calls);
    // λ3 is forced to zero even when the config asks for it
    let mut cfg = micro_train_config(1);
    cfg.mode = TrainMode::Domain;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    ensure!(state.stats.attribute_cycle_calls == 0, "λ3 from config leaked into domain mode");
    // instance mode does count them
    let (mut state, manifest, bank) = state_for(&micro_train_config(1), &run.data);
    train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    ensure!(state.stats.attribute_cycle_calls == state.schema.m() as u64, "instance mode cycle count wrong");
    Ok(())
}

pub fn check_augmentation_paths(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(1);
    cfg.multiplex_augment_prob = 0.0;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    for _ in 0..2 {
        for (_, t) in train_iteration(&mut state, &manifest, &bank).map_err(e)? {
            ensure!(t.augmentation.is_none(), "augmented with probability 0");
        }
    }
    cfg.multiplex_augment_prob = 1.0;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    let traces = train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    for (_, t) in &traces {
        let (k, _) = t.augmentation.ok_or("no augmentation with probability 1 once the registry is full")?;
        ensure!(k != t.value.attr, "augmented the target attribute");
    }
    Ok(())
}

/// A blown-up objective aborts with the previous checkpoint kept.
pub fn check_divergence(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(3);
    cfg.weights = LossWeights::new(1.0, 1e6, 0.0).map_err(e)?;
    let out = run.dir.path().join("diverge");
    let manifest = load_manifest(&run.data).map_err(e)?;
    match run_training(&cfg, &manifest, &out, false, &Device::Cpu) {
        Err(Error::Divergence { iteration, report, .. }) => {
            ensure!(iteration == 1, "diverged at iteration {iteration}");
            ensure!(report.generator_total.abs() > 1e4, "report does not show the blow-up");
        }
        other => return Err(format!("expected a divergence error, got {other:?}")),
    }
    let latest = latest_checkpoint(&out).map_err(e)?.ok_or("no checkpoint retained")?;
    ensure!(latest == checkpoint_path(&out, 0), "latest marker points at {}", latest.display());
    Ok(())
}

pub fn check_checkpoint_roundtrip(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(1);
    cfg.network.normalization = slotswap::nets::Normalization::Batch;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    let path = run.dir.path().join("rt.bin");
    save_checkpoint(&path, &state).map_err(e)?;
    let back = load_train_state(&path, &Device::Cpu).map_err(e)?;
    ensure!(back.models.fingerprint().map_err(e)? == state.models.fingerprint().map_err(e)?, "weights changed");
    ensure!(back.iteration == state.iteration && back.rng == state.rng, "counters or rng changed");
    for v in state.schema.all_values() {
        for (a, b) in [(&state.frozen_registry, &back.frozen_registry), (&state.live_registry, &back.live_registry)] {
            let (x, y) = (a.mean(v).ok_or("empty entry")?, b.mean(v).ok_or("entry lost")?);
            ensure!(tensors_identical(x, y).map_err(e)?, "registry entry {} changed", v.global);
            ensure!(a.count(v) == b.count(v), "registry count changed");
        }
    }
    // continuing from either state gives the same next iteration
    let mut s2 = back;
    let r1 = train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    let r2 = train_iteration(&mut s2, &manifest, &bank).map_err(e)?;
    for ((a, _), (b, _)) in r1.iter().zip(&r2) {
        ensure!(a == b, "reports diverge after reload: {a:?} vs {b:?}");
    }
    Ok(())
}

// ---------------------------------------------------------------- degenerate equivalences

pub fn check_self_reference(seed: u64) -> Check {
    for dtype in [DType::F32, DType::F64] {
        let (_, models) = micro_models(dtype, seed);
        let x = random_images(3, 16, dtype, seed);
        for attr in 0..3 {
            let t = transfer_instance(&models, &x, &x, attr).map_err(e)?;
            let r = reconstruct(&models, &x).map_err(e)?;
            ensure!(tensors_identical(&t.x_trans, &r).map_err(e)?, "self-transfer of slot {attr} != reconstruction ({dtype:?})");
        }
    }
    Ok(())
}

pub fn check_single_entry_registry(seed: u64, tol: f64) -> Check {
    let (schema, models) = micro_models(DType::F32, seed);
    let x = random_images(3, 16, DType::F32, seed);
    let r = random_images(1, 16, DType::F32, seed + 1);
    let mut worst: f64 = 0.0;
    for v in schema.all_values() {
        let mut reg = AverageVectorRegistry::new(&schema, models.layout(), 0.01).map_err(e)?;
        let code = encode_code(&models, &r, Mode::Eval).map_err(e)?;
        reg.update(v, code.slot(v.attr).map_err(e)?, UpdateMode::Minibatch).map_err(e)?;
        let dom = transfer_domain(&models, &reg, &x, v).map_err(e)?;
        let inst = transfer_instance(&models, &x, &r, v.attr).map_err(e)?.x_trans;
        worst = worst.max(super::max_abs_diff(&dom, &inst));
    }
    ensure!(worst <= tol, "domain vs instance transfer differ by {worst:e}");
    Ok(())
}

pub fn check_domain_cycle_count(run: &MicroRun) -> Check {
    let mut cfg = micro_train_config(2);
    cfg.mode = TrainMode::Domain;
    cfg.weights = LossWeights::new(1.0, 10.0, 0.0).map_err(e)?;
    let (mut state, manifest, bank) = state_for(&cfg, &run.data);
    for _ in 0..2 {
        train_iteration(&mut state, &manifest, &bank).map_err(e)?;
    }
    ensure!(
        state.stats.attribute_cycle_calls == 0,
        "attribute-consistency path evaluated {} times",
        state.stats.attribute_cycle_calls
    );
    ensure!(state.stats.steps == 2 * state.schema.m() as u64, "{} steps", state.stats.steps);
    Ok(())
}

pub fn micro_cfg_network() -> NetworkConfig {
    micro_network()
}
