//! Verifies analytic gradients against central finite differences in double
//! precision. Every differentiable building block is registered under a
//! name so the whole table can be run from the command line; a deliberately
//! corrupted entry serves as the negative control.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{
    add_drb, bind_params, discriminator_forward, drb_forward, init_discriminator, init_snet,
    snet_forward, AblationFlags, Bindings, DRBConfig, DiscriminatorConfig, Mode, ParamSet,
    SNetConfig,
};
use crate::rng::derive_rng;
use crate::tensor::{BnStats, Gradients, Padding, Shape, Tape, TensorRef};

/// Central-difference step for single ops; with f64 arithmetic this balances
/// truncation and rounding error at roughly 1e-9 absolute.
pub const FD_STEP: f64 = 1e-4;
/// Step for deep composites: stacked batch norms over few samples can have
/// third derivatives large enough that h=1e-4 truncation error alone exceeds
/// the tolerance, while f64 rounding noise at h=1e-5 stays negligible.
pub const FD_STEP_DEEP: f64 = 1e-5;
/// Absolute differences below this are central-difference rounding noise
/// (eps * |objective| / step), not gradient errors; they are treated as
/// exact. This covers parameters whose true gradient is identically zero,
/// such as a convolution bias feeding a batch norm.
pub const FD_NOISE_FLOOR: f64 = 1e-7;
/// Default maximum relative error accepted per parameter group.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Default number of coordinates probed per parameter group.
pub const DEFAULT_COORDS: usize = 6;
/// Central differences assume the objective is smooth across the probe
/// interval. When a perturbation pushes some downstream pre-activation across
/// a ReLU corner, the second difference jumps from O(step^2 * f'') to
/// O(step * slope-gap); a coordinate whose second-difference quotient
/// `|f(x+h) - 2 f(x) + f(x-h)| / 2h` exceeds this is measuring a slope
/// mixture, not the derivative, and is excluded. Slope gaps small enough to
/// pass this gate produce absolute errors below [`FD_NOISE_FLOOR`].
pub const KINK_CURVATURE_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Coordinates excluded by the [`KINK_CURVATURE_TOL`] gate.
    pub skipped: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel() < tol
    }
}

/// Registered operations, cheapest first. All are expected to pass
/// [`DEFAULT_TOL`]; the separate `negative_control` entry is expected to
/// fail and is deliberately not listed here.
pub fn ops() -> &'static [&'static str] {
    &[
        "identity",
        "relu",
        "leaky_relu",
        "sigmoid",
        "add",
        "concat",
        "dropout",
        "avgpool",
        "conv1",
        "conv3",
        "tconv",
        "batchnorm",
        "drb",
        "snet_mini",
        "discriminator_mini",
    ]
}

pub fn check_all(seed: u64, max_coords: usize) -> Result<Vec<GradReport>> {
    ops().iter().map(|op| check_op(op, seed, max_coords)).collect()
}

pub fn check_op(op: &str, seed: u64, max_coords: usize) -> Result<GradReport> {
    match op {
        "identity" => identity_case(seed, max_coords),
        "relu" => activation_case("relu", seed, max_coords),
        "leaky_relu" => activation_case("leaky_relu", seed, max_coords),
        "sigmoid" => activation_case("sigmoid", seed, max_coords),
        "add" => add_case(seed, max_coords),
        "concat" => concat_case(seed, max_coords),
        "dropout" => dropout_case(seed, max_coords),
        "avgpool" => avgpool_case(seed, max_coords),
        "conv1" => conv_case("conv1", seed, max_coords),
        "conv3" => conv_case("conv3", seed, max_coords),
        "tconv" => tconv_case(seed, max_coords),
        "batchnorm" => batchnorm_case(seed, max_coords),
        "drb" => drb_case(seed, max_coords),
        "snet_mini" => snet_case(seed, max_coords),
        "discriminator_mini" => discriminator_case(seed, max_coords),
        "negative_control" => negative_control_case(seed, max_coords),
        other => Err(Error::Config(format!("unknown gradcheck op '{other}'"))),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_vals(seed: u64, tag: &str, n: usize) -> Vec<f64> {
    let mut rng = derive_rng(seed, tag);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Mixed-sign objective weights keep individual contributions visible
/// instead of cancelling into one large sum.
fn objective_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = derive_rng(seed, "gc_obj");
    (0..n)
        .map(|_| {
            let mag: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn named_grads(
    params: &ParamSet<f64>,
    bind: &Bindings,
    grads: &Gradients<f64>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for e in params.iter().filter(|e| e.trainable) {
        let t = bind.get(&e.name)?;
        let g = match grads.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; e.values.len()],
        };
        out.push((e.name.clone(), g));
    }
    Ok(out)
}

/// Compares the analytic gradient at `params` against central differences,
/// probing up to `max_coords` seeded coordinates per parameter group.
fn run_case<F>(
    op: &str,
    params: &ParamSet<f64>,
    mut objective: F,
    seed: u64,
    max_coords: usize,
    step: f64,
) -> Result<GradReport>
where
    F: FnMut(&ParamSet<f64>, bool) -> Result<(f64, Option<Vec<(String, Vec<f64>)>>)>,
{
    let (f0, grads) = objective(params, true)?;
    let grads = grads.ok_or_else(|| Error::Config("objective returned no gradients".into()))?;
    let mut rng = derive_rng(seed, "gc_coords");
    let mut groups = Vec::with_capacity(grads.len());
    for (name, g) in &grads {
        let coords: Vec<usize> = if g.len() <= max_coords {
            (0..g.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, g.len(), max_coords).into_vec()
        };
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut skipped = 0usize;
        for &i in &coords {
            let base = params.get(name)?.values[i];
            let mut probe = params.clone();
            probe.get_mut(name)?.values[i] = base + step;
            let (fp, _) = objective(&probe, false)?;
            probe.get_mut(name)?.values[i] = base - step;
            let (fm, _) = objective(&probe, false)?;
            if (fp - 2.0 * f0 + fm).abs() / (2.0 * step) > KINK_CURVATURE_TOL {
                skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * step);
            let abs = (fd - g[i]).abs();
            let rel = if abs < FD_NOISE_FLOOR {
                0.0
            } else {
                abs / fd.abs().max(g[i].abs()).max(1e-6)
            };
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        groups.push(GroupReport {
            group: name.clone(),
            checked: coords.len() - skipped,
            skipped,
            max_abs,
            max_rel,
        });
    }
    // A wrong gradient shows up at smooth coordinates; kink crossings are
    // isolated. If the gate fires this often the fixture itself is unusable
    // and silence would mask real errors.
    let sampled: usize = groups.iter().map(|g| g.checked + g.skipped).sum();
    let skipped: usize = groups.iter().map(|g| g.skipped).sum();
    if skipped * 4 > sampled {
        return Err(Error::Config(format!(
            "gradcheck {op}: {skipped} of {sampled} probed coordinates straddle kinks"
        )));
    }
    Ok(GradReport { op: op.to_string(), groups })
}

/// Builds a case from a graph constructor: parameters are bound as leaves,
/// the constructor returns the output tensor, and the objective is a fixed
/// weighted sum of its values.
fn tape_case<F>(
    op: &'static str,
    params: ParamSet<f64>,
    seed: u64,
    max_coords: usize,
    step: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &Bindings, &mut ParamSet<f64>) -> Result<TensorRef>,
{
    let out_len = {
        let mut p = params.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bind = bind_params(&mut tape, &p)?;
        let out = build(&mut tape, &bind, &mut p)?;
        tape.values(out).len()
    };
    let w = objective_weights(seed, out_len);
    let objective = |p: &ParamSet<f64>, want: bool| {
        let mut p = p.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bind = bind_params(&mut tape, &p)?;
        let out = build(&mut tape, &bind, &mut p)?;
        let value = dot(tape.values(out), &w);
        if want {
            let grads = tape.backward(&[(out, w.clone())])?;
            Ok((value, Some(named_grads(&p, &bind, &grads)?)))
        } else {
            Ok((value, None))
        }
    };
    run_case(op, &params, objective, seed, max_coords, step)
}

fn input_params(seed: u64, entries: &[(&str, Shape)]) -> ParamSet<f64> {
    let mut params = ParamSet::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        params.add(name, *shape, rand_vals(seed, &format!("gc_in{i}"), shape.len()), true);
    }
    params
}

fn identity_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(seed, &[("x", Shape::new(1, 2, 2, 3, 4))]);
    tape_case("identity", params, seed, max_coords, FD_STEP, |_, bind, _| bind.get("x"))
}

fn activation_case(op: &'static str, seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(seed, &[("x", Shape::new(2, 2, 3, 4, 4))]);
    tape_case(op, params, seed, max_coords, FD_STEP, move |tape, bind, _| {
        let x = bind.get("x")?;
        Ok(match op {
            "relu" => tape.relu(x),
            "leaky_relu" => tape.leaky_relu(x, 0.2),
            _ => tape.sigmoid(x),
        })
    })
}

fn add_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let sh = Shape::new(1, 2, 3, 3, 3);
    let params = input_params(seed, &[("a", sh), ("b", sh)]);
    tape_case("add", params, seed, max_coords, FD_STEP, |tape, bind, _| {
        tape.add(bind.get("a")?, bind.get("b")?)
    })
}

fn concat_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(
        seed,
        &[
            ("a", Shape::new(1, 2, 3, 3, 3)),
            ("b", Shape::new(1, 1, 3, 3, 3)),
            ("c", Shape::new(1, 3, 3, 3, 3)),
        ],
    );
    tape_case("concat", params, seed, max_coords, FD_STEP, |tape, bind, _| {
        tape.concat_channels(&[bind.get("a")?, bind.get("b")?, bind.get("c")?])
    })
}

fn dropout_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let sh = Shape::new(1, 2, 4, 4, 4);
    let params = input_params(seed, &[("x", sh)]);
    let mut mask_rng = derive_rng(seed, "gc_mask");
    let mask: Vec<bool> = (0..sh.len()).map(|_| mask_rng.random::<f64>() >= 0.3).collect();
    tape_case("dropout", params, seed, max_coords, FD_STEP, move |tape, bind, _| {
        tape.dropout_with_mask(bind.get("x")?, mask.clone(), 0.3)
    })
}

fn avgpool_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(seed, &[("x", Shape::new(1, 2, 4, 6, 6))]);
    tape_case("avgpool", params, seed, max_coords, FD_STEP, |tape, bind, _| {
        tape.avgpool3d(bind.get("x")?, [2, 2, 2])
    })
}

fn conv_case(op: &'static str, seed: u64, max_coords: usize) -> Result<GradReport> {
    let k = if op == "conv1" { 1 } else { 3 };
    let stride = if op == "conv1" { [1, 1, 1] } else { [1, 2, 2] };
    let params = input_params(
        seed,
        &[
            ("x", Shape::new(2, 2, 4, 6, 6)),
            ("w", Shape::new(3, 2, k, k, k)),
            ("b", Shape::new(1, 3, 1, 1, 1)),
        ],
    );
    tape_case(op, params, seed, max_coords, FD_STEP, move |tape, bind, _| {
        tape.conv3d(bind.get("x")?, bind.get("w")?, Some(bind.get("b")?), stride, Padding::Same)
    })
}

fn tconv_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(
        seed,
        &[
            ("x", Shape::new(1, 3, 3, 4, 4)),
            ("w", Shape::new(3, 2, 2, 2, 2)),
            ("b", Shape::new(1, 2, 1, 1, 1)),
        ],
    );
    tape_case("tconv", params, seed, max_coords, FD_STEP, |tape, bind, _| {
        tape.tconv3d(bind.get("x")?, bind.get("w")?, Some(bind.get("b")?), [2, 2, 2], [0, 0, 0])
    })
}

fn batchnorm_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(
        seed,
        &[
            ("x", Shape::new(2, 3, 4, 4, 4)),
            ("scale", Shape::new(1, 3, 1, 1, 1)),
            ("shift", Shape::new(1, 3, 1, 1, 1)),
        ],
    );
    tape_case("batchnorm", params, seed, max_coords, FD_STEP, |tape, bind, _| {
        // Fresh running stats per evaluation; train mode differentiates
        // through the batch statistics.
        let mut stats = BnStats::new(3);
        tape.batchnorm(bind.get("x")?, bind.get("scale")?, bind.get("shift")?, &mut stats, true, 0.1, 1e-5)
    })
}

fn drb_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let cfg = DRBConfig { in_channels: 3, layers: 2, growth: 2, dropout: 0.2 };
    let flags = AblationFlags::default();
    let mut params: ParamSet<f64> = input_params(seed, &[("x", Shape::new(1, 3, 4, 6, 6))]);
    add_drb(&mut params, &mut derive_rng(seed, "gc_drb"), "blk", &cfg, flags);
    tape_case("drb", params, seed, max_coords, FD_STEP_DEEP, move |tape, bind, p| {
        let x = bind.get("x")?;
        let mut rng = derive_rng(seed, "gc_drop");
        drb_forward(tape, p, bind, "blk", &cfg, flags, x, Mode::Train, &mut rng)
    })
}

fn snet_config_mini() -> SNetConfig {
    SNetConfig {
        base_width: 2,
        growth: 2,
        down_layers: [1, 1, 1],
        up_layers: [1, 1, 1],
        dropout: 0.3,
        flags: AblationFlags::default(),
    }
}

fn snet_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let cfg = snet_config_mini();
    let params: ParamSet<f64> = init_snet(&cfg, &mut derive_rng(seed, "gc_init"))?;
    let ish = Shape::new(1, 1, 8, 16, 16);
    let input = rand_vals(seed, "gc_img", ish.len());
    tape_case("snet_mini", params, seed, max_coords, FD_STEP_DEEP, move |tape, bind, p| {
        let x = tape.constant(input.clone(), ish)?;
        let mut rng = derive_rng(seed, "gc_drop");
        let out = snet_forward(tape, &cfg, p, bind, x, Mode::Train, &mut rng)?;
        Ok(out.prob)
    })
}

fn discriminator_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let cfg = DiscriminatorConfig { widths: [2, 2, 2], leaky_slope: 0.2 };
    let channels = [3usize, 3, 3];
    let mut params: ParamSet<f64> = input_params(
        seed,
        &[
            ("f0", Shape::new(1, 3, 2, 2, 2)),
            ("f1", Shape::new(1, 3, 4, 4, 4)),
            ("f2", Shape::new(1, 3, 8, 8, 8)),
        ],
    );
    let disc: ParamSet<f64> = init_discriminator(&cfg, channels, &mut derive_rng(seed, "gc_disc"))?;
    for e in disc.iter() {
        params.add(&e.name, e.shape, e.values.clone(), e.trainable);
    }
    tape_case("discriminator_mini", params, seed, max_coords, FD_STEP_DEEP, move |tape, bind, p| {
        let feats = [bind.get("f0")?, bind.get("f1")?, bind.get("f2")?];
        discriminator_forward(tape, &cfg, p, bind, &feats, Mode::Train)
    })
}

/// Same graph as `conv3` but with the analytic gradients scaled by 3%: the
/// harness must flag it.
fn negative_control_case(seed: u64, max_coords: usize) -> Result<GradReport> {
    let params = input_params(
        seed,
        &[("x", Shape::new(1, 2, 4, 4, 4)), ("w", Shape::new(2, 2, 3, 3, 3))],
    );
    let w = {
        let mut p = params.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bind = bind_params(&mut tape, &p)?;
        let out =
            tape.conv3d(bind.get("x")?, bind.get("w")?, None, [1, 1, 1], Padding::Same)?;
        let _ = &mut p;
        objective_weights(seed, tape.values(out).len())
    };
    let objective = |p: &ParamSet<f64>, want: bool| {
        let p = p.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bind = bind_params(&mut tape, &p)?;
        let out =
            tape.conv3d(bind.get("x")?, bind.get("w")?, None, [1, 1, 1], Padding::Same)?;
        let value = dot(tape.values(out), &w);
        if want {
            let grads = tape.backward(&[(out, w.clone())])?;
            let mut named = named_grads(&p, &bind, &grads)?;
            for (_, g) in &mut named {
                for v in g {
                    *v *= 1.03;
                }
            }
            Ok((value, Some(named)))
        } else {
            Ok((value, None))
        }
    };
    run_case("negative_control", &params, objective, seed, max_coords, FD_STEP)
}
