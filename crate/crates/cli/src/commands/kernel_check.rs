//! Self-consistency suites for the separable heat kernel: product kernel vs
//! Kronecker-factored kernels, the three equivalent forward routes, and RK4
//! integration against the closed form.

use std::path::Path;

use citrus_core::analysis::sub_seed;
use citrus_core::graph::{cartesian_sum, erdos_renyi, kron_chain};
use citrus_core::layer::{
    channel_matmul, spectral_forward, tpdeg_integrate, Activation, CitrusBlock, FieldMode,
    ReceptiveField,
};
use citrus_core::scalar::softplus_inv;
use citrus_core::spectral::{eigh, heat_kernel_from_basis};
use citrus_core::tensor::{mode_product, vectorize};
use citrus_core::{CitrusError, FactorGraph64, Matrix64, Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::{Config, Schema};
use crate::report::{fmt_f64, json_num, write_report, Csv};

pub fn schema() -> Schema {
    Schema::new(
        "kernel-check",
        &[
            ("instances", Some("50")),
            ("factor_counts", Some("2,3")),
            ("max_nodes", Some("8")),
            ("times", Some("0.1,1,5")),
            ("tolerance", Some("1e-9")),
            ("equivalence_instances", Some("20")),
            ("equivalence_tolerance", Some("1e-9")),
            ("rk4_instances", Some("10")),
            ("rk4_dt", Some("0.001")),
            ("rk4_t_end", Some("1")),
            ("rk4_tolerance", Some("1e-8")),
            ("rk4_max_nodes", Some("6")),
            ("rk4_ratio_dt", Some("0.05")),
            ("rk4_ratio_lo", Some("14")),
            ("rk4_ratio_hi", Some("18")),
            // `descending` pairs the Kronecker chain with column-major
            // vectorization; `ascending` is a deliberate mismatch that must
            // be caught.
            ("kron_order", Some("descending")),
            ("seed", Some("0")),
        ],
    )
}

struct Instance {
    graphs: Vec<FactorGraph64>,
}

/// Factor graphs for instance `i`: the factor count cycles through
/// `factor_counts`, sizes and edge probabilities are drawn per instance.
fn draw_instance(
    seed: u64,
    i: u64,
    factor_counts: &[usize],
    max_nodes: usize,
) -> Result<Instance> {
    let base = sub_seed(seed, i);
    let factors = factor_counts[(i as usize) % factor_counts.len()];
    let mut dims = ChaCha8Rng::seed_from_u64(sub_seed(base, 0));
    let mut graphs = Vec::with_capacity(factors);
    for p in 0..factors {
        let n = dims.gen_range(2..=max_nodes);
        let prob = dims.gen_range(0.3..0.9);
        graphs.push(erdos_renyi(n, prob, sub_seed(base, 1000 + p as u64), false)?);
    }
    Ok(Instance { graphs })
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

struct CheckRow {
    name: &'static str,
    instances: usize,
    value: f64,
    lower: f64,
    upper: f64,
}

impl CheckRow {
    fn pass(&self) -> bool {
        self.lower <= self.value && self.value <= self.upper
    }
}

/// Max entrywise error between the product-graph kernel and the Kronecker
/// chain of factor kernels, over all instances and times.
fn separability(cfg: &Config) -> Result<CheckRow> {
    let instances = cfg.usize("instances")?;
    let factor_counts = cfg.usize_list("factor_counts")?;
    let max_nodes = cfg.usize("max_nodes")?;
    let times = cfg.f64_list("times")?;
    let seed = cfg.u64("seed")?;
    let descending = match cfg.get("kron_order")? {
        "descending" => true,
        "ascending" => false,
        other => {
            return Err(CitrusError::InvalidArgument(format!(
                "kron_order must be descending or ascending, got {other:?}"
            )))
        }
    };
    validate_factor_counts(&factor_counts)?;

    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = draw_instance(seed, i as u64, &factor_counts, max_nodes)?;
        let laps: Vec<Matrix64> =
            inst.graphs.iter().map(|g| g.laplacian().clone()).collect();
        let sum_basis = eigh(&cartesian_sum(&laps, true)?)?;
        let factor_bases: Vec<_> =
            laps.iter().map(eigh).collect::<Result<Vec<_>>>()?;
        for &t in &times {
            let product_kernel = heat_kernel_from_basis(&sum_basis, t)?;
            let factor_kernels: Vec<Matrix64> = factor_bases
                .iter()
                .map(|b| heat_kernel_from_basis(b, t))
                .collect::<Result<Vec<_>>>()?;
            let chained = kron_chain(&factor_kernels, descending)?;
            worst = worst.max(product_kernel.max_abs_diff(&chained));
        }
    }
    Ok(CheckRow {
        name: "separability_max_error",
        instances,
        value: worst,
        lower: 0.0,
        upper: cfg.f64("tolerance")?,
    })
}

fn validate_factor_counts(factor_counts: &[usize]) -> Result<()> {
    if factor_counts.is_empty() || factor_counts.iter().any(|&p| p < 2) {
        return Err(CitrusError::InvalidArgument(
            "factor_counts must be a nonempty list of counts >= 2".into(),
        ));
    }
    Ok(())
}

/// Worst pairwise relative Frobenius error between the tensor, vectorized,
/// and spectral forms of one diffusion layer.
fn equivalence(cfg: &Config) -> Result<CheckRow> {
    let instances = cfg.usize("equivalence_instances")?;
    let factor_counts = cfg.usize_list("factor_counts")?;
    let max_nodes = cfg.usize("max_nodes")?;
    let seed = cfg.u64("seed")?;
    validate_factor_counts(&factor_counts)?;

    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = draw_instance(sub_seed(seed, 1), i as u64, &factor_counts, max_nodes)?;
        let laps: Vec<Matrix64> = inst
            .graphs
            .iter()
            .map(|g| g.normalized_laplacian().clone())
            .collect();
        let factors = laps.len();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(seed, 1), 5000 + i as u64));
        let f_in = rng.gen_range(1..4usize);
        let f_out = rng.gen_range(1..4usize);
        let times: Vec<f64> = (0..factors).map(|_| rng.gen_range(0.2..2.0)).collect();
        let mut shape: Vec<usize> = inst.graphs.iter().map(|g| g.n()).collect();
        shape.push(f_in);
        let u = random_tensor(&shape, &mut rng);
        let w = Matrix64::from_fn(f_in, f_out, |_, _| rng.gen_range(-1.0..1.0));

        let bases: Vec<_> = laps.iter().map(eigh).collect::<Result<Vec<_>>>()?;
        let kernels: Vec<Matrix64> = bases
            .iter()
            .zip(&times)
            .map(|(b, &t)| heat_kernel_from_basis(b, t))
            .collect::<Result<Vec<_>>>()?;

        // Tensor form: one mode product per factor, then the channel mix.
        let mut diffused = u.clone();
        for (p, k) in kernels.iter().enumerate() {
            diffused = mode_product(&diffused, k, p)?;
        }
        let tensor_out = channel_matmul(&diffused, &w)?;

        // Vectorized form: a single Kronecker-chain operator on vec(u),
        // with the channel mix as the slowest factor.
        let op = w.transpose().kron(&kron_chain(&kernels, true)?);
        let vec_u = vectorize(&u);
        let mut vec_out = vec![0.0f64; op.rows()];
        for (c, &uv) in vec_u.iter().enumerate() {
            if uv == 0.0 {
                continue;
            }
            let col = op.col(c);
            for (o, &m) in vec_out.iter_mut().zip(col) {
                *o += m * uv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape[factors] = f_out;
        let vectorized_out = Tensor64::from_data(&out_shape, vec_out)?;

        // Spectral form: the layer's own forward with full bases.
        let block = CitrusBlock {
            receptive: ReceptiveField::with_raw(
                FieldMode::PerFactor,
                factors,
                1,
                times.iter().map(|&t| softplus_inv(t)).collect(),
            )?,
            mix_weights: w.clone(),
            mlp_weights: Vec::new(),
            activation: Activation::Identity,
            residual: false,
        };
        let spectral_out = spectral_forward(&u, &bases, &block)?;

        let scale = tensor_out.frobenius_norm().max(1e-30);
        for other in [&vectorized_out, &spectral_out] {
            worst = worst.max(tensor_out.sub(other).frobenius_norm() / scale);
        }
        worst = worst
            .max(vectorized_out.sub(&spectral_out).frobenius_norm() / scale);
    }
    Ok(CheckRow {
        name: "equivalence_max_rel_error",
        instances,
        value: worst,
        lower: 0.0,
        upper: cfg.f64("equivalence_tolerance")?,
    })
}

/// RK4 against the closed-form kernel: max error at the configured step
/// size, plus the median error contraction when the step is halved.
fn rk4_checks(cfg: &Config) -> Result<(CheckRow, CheckRow)> {
    let instances = cfg.usize("rk4_instances")?;
    let factor_counts = cfg.usize_list("factor_counts")?;
    let max_nodes = cfg.usize("rk4_max_nodes")?;
    let dt = cfg.f64("rk4_dt")?;
    let t_end = cfg.f64("rk4_t_end")?;
    let ratio_dt = cfg.f64("rk4_ratio_dt")?;
    let seed = cfg.u64("seed")?;
    validate_factor_counts(&factor_counts)?;

    let mut worst = 0.0f64;
    let mut ratios = Vec::with_capacity(instances);
    for i in 0..instances {
        let inst = draw_instance(sub_seed(seed, 2), i as u64, &factor_counts, max_nodes)?;
        let laps: Vec<Matrix64> =
            inst.graphs.iter().map(|g| g.laplacian().clone()).collect();
        let mut shape: Vec<usize> = inst.graphs.iter().map(|g| g.n()).collect();
        shape.push(2);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(seed, 2), 5000 + i as u64));
        let u0 = random_tensor(&shape, &mut rng);

        let mut exact = u0.clone();
        for (p, l) in laps.iter().enumerate() {
            let kernel = heat_kernel_from_basis(&eigh(l)?, t_end)?;
            exact = mode_product(&exact, &kernel, p)?;
        }

        let integrated = tpdeg_integrate(&u0, &laps, t_end, dt)?;
        worst = worst.max(integrated.max_abs_diff(&exact));

        let coarse = tpdeg_integrate(&u0, &laps, t_end, ratio_dt)?.max_abs_diff(&exact);
        let fine = tpdeg_integrate(&u0, &laps, t_end, ratio_dt / 2.0)?.max_abs_diff(&exact);
        if fine > 0.0 {
            ratios.push(coarse / fine);
        }
    }
    if ratios.is_empty() {
        return Err(CitrusError::Numerical(
            "every halved-step error was exactly zero; contraction ratio undefined".into(),
        ));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let median = ratios[ratios.len() / 2];
    Ok((
        CheckRow {
            name: "rk4_max_error",
            instances,
            value: worst,
            lower: 0.0,
            upper: cfg.f64("rk4_tolerance")?,
        },
        CheckRow {
            name: "rk4_halving_ratio_median",
            instances,
            value: median,
            lower: cfg.f64("rk4_ratio_lo")?,
            upper: cfg.f64("rk4_ratio_hi")?,
        },
    ))
}

pub fn evaluate(cfg: &Config) -> Result<Vec<CheckRowPublic>> {
    let mut rows = vec![separability(cfg)?, equivalence(cfg)?];
    let (err, ratio) = rk4_checks(cfg)?;
    rows.push(err);
    rows.push(ratio);
    Ok(rows
        .into_iter()
        .map(|r| CheckRowPublic {
            name: r.name,
            instances: r.instances,
            value: r.value,
            lower: r.lower,
            upper: r.upper,
            pass: r.pass(),
        })
        .collect())
}

/// One line of the check table.
pub struct CheckRowPublic {
    pub name: &'static str,
    pub instances: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

pub fn run(cfg: &Config, out_dir: &Path) -> Result<Vec<String>> {
    let rows = evaluate(cfg)?;
    let mut csv = Csv::new(&["check", "instances", "value", "lower", "upper", "pass"]);
    let mut results = serde_json::Map::new();
    let mut failures = Vec::new();
    for row in &rows {
        csv.row(&[
            row.name.to_string(),
            row.instances.to_string(),
            fmt_f64(row.value),
            fmt_f64(row.lower),
            fmt_f64(row.upper),
            row.pass.to_string(),
        ]);
        let mut entry = serde_json::Map::new();
        entry.insert("instances".into(), Value::from(row.instances));
        entry.insert("value".into(), json_num(row.value));
        entry.insert("lower".into(), json_num(row.lower));
        entry.insert("upper".into(), json_num(row.upper));
        entry.insert("pass".into(), Value::from(row.pass));
        results.insert(row.name.to_string(), Value::Object(entry));
        if !row.pass {
            failures.push(format!(
                "{}: value {} outside [{}, {}]",
                row.name,
                fmt_f64(row.value),
                fmt_f64(row.lower),
                fmt_f64(row.upper)
            ));
        }
    }
    csv.write(out_dir, "kernel_check.csv")?;
    write_report(out_dir, "kernel-check", cfg, Value::Object(results), &failures)?;
    Ok(failures)
}
