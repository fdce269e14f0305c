//! Central finite differences against the analytic backward pass on small
//! random fields.

use std::sync::Arc;

use chromafield_core::color::{soft_label, AbBinTable};
use chromafield_core::field::{Aabb, FieldInit, FieldParams, GradBuffer};
use chromafield_core::math::Vec3;
use chromafield_core::render::{integrate, render_backward, ColorMode, Footprint, Ray};
use chromafield_core::seed;
use chromafield_core::train::{loss_classification, loss_photometric};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Photometric,
    Classification,
}

#[derive(Debug, Default)]
pub struct Report {
    pub instances: usize,
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

const STEP: f64 = 1e-5;
/// Below this size both derivatives count as zero.
const ABS_FLOOR: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-3;

fn tiny_table() -> Arc<AbBinTable> {
    Arc::new(AbBinTable::from_centers(10.0, vec![[-10.0, -10.0], [0.0, 0.0], [0.0, 10.0], [10.0, 0.0]]).unwrap())
}

struct Instance {
    field: FieldParams,
    ray: Ray,
    t: Vec<f64>,
    mode: ColorMode,
    gt_lum: f64,
    gt_ab: [f64; 2],
}

fn random_instance(rng: &mut impl Rng, loss: Loss) -> Instance {
    let table = tiny_table();
    let mut field = FieldParams::new(Aabb::cube(1.0), [2, 2, 2], table, FieldInit::default()).unwrap();
    for v in field.density.iter_mut() {
        *v = rng.random_range(-2.0..2.5);
    }
    for v in field.luminance.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    for v in field.logits.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    // Ray from outside the box through a random interior point.
    let target = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let dir = if dir.norm() < 0.1 { Vec3::new(0.3, -0.2, 1.0).normalized() } else { dir.normalized() };
    let origin = target - dir * 3.0;
    let (t_near, t_far) = field.bbox.intersect(origin, dir).expect("ray passes an interior point");
    let ray = Ray { origin, dir, t_near, t_far };
    let m = rng.random_range(1..=4);
    let mut t: Vec<f64> = (0..m).map(|_| rng.random_range(t_near..t_far)).collect();
    t.sort_by(f64::total_cmp);
    let mode = match loss {
        Loss::Photometric => ColorMode::Off,
        Loss::Classification if rng.random_bool(0.5) => ColorMode::RenderLogits,
        Loss::Classification => ColorMode::RenderProbabilities,
    };
    Instance {
        field,
        ray,
        t,
        mode,
        gt_lum: rng.random_range(0.0..1.0),
        gt_ab: [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)],
    }
}

fn loss_value(inst: &Instance, field: &FieldParams, loss: Loss) -> f64 {
    let state = integrate(field, &inst.ray, inst.t.clone(), inst.mode);
    match loss {
        Loss::Photometric => loss_photometric(&[state.lum], &[inst.gt_lum]).0,
        Loss::Classification => {
            let label = soft_label(inst.gt_ab, field.table(), 3, 5.0);
            loss_classification(&state.dist, &[label], field.q(), 1e-8).0
        }
    }
}

fn analytic(inst: &Instance, loss: Loss) -> GradBuffer {
    let field = &inst.field;
    let state = integrate(field, &inst.ray, inst.t.clone(), inst.mode);
    let mut grads = GradBuffer::for_field(field);
    match loss {
        Loss::Photometric => {
            let (_, g) = loss_photometric(&[state.lum], &[inst.gt_lum]);
            render_backward(field, &state, g[0], None, &mut grads);
        }
        Loss::Classification => {
            let label = soft_label(inst.gt_ab, field.table(), 3, 5.0);
            let (_, g) = loss_classification(&state.dist, &[label], field.q(), 1e-8);
            render_backward(field, &state, 0.0, Some(&g), &mut grads);
        }
    }
    grads
}

/// Logit gradients through the frozen-density footprint (training's color path).
fn footprint_logits(inst: &Instance) -> Vec<f64> {
    let field = &inst.field;
    let q = field.q();
    let state = integrate(field, &inst.ray, inst.t.clone(), ColorMode::Off);
    let fp = Footprint::from_render(field, &state, 0.0);
    let mut z = vec![0.0; q];
    fp.render_logits(field, &mut z);
    let mut p = vec![0.0; q];
    chromafield_core::math::softmax_into(&z, &mut p);
    let label = soft_label(inst.gt_ab, field.table(), 3, 5.0);
    let (_, g) = loss_classification(&p, &[label], q, 1e-8);
    let mut dz = vec![0.0; q];
    chromafield_core::math::softmax_backward_into(&p, &g, &mut dz);
    let mut grads = GradBuffer::for_field(field);
    fp.backward_logits(&dz, &mut grads);
    grads.logits
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn check(report: &mut Report, what: &str, idx: usize, analytic: f64, numeric: f64) {
    let e = rel_err(analytic, numeric);
    report.checked += 1;
    report.worst = report.worst.max(e);
    if e > TOLERANCE {
        report.failures.push(format!("{what}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {e:e}"));
    }
}

/// Checks every parameter of `instances` random instances per loss.
pub fn run(instances: usize, seed_value: u64) -> Report {
    let mut rng = seed::rng(seed_value);
    let mut report = Report::default();
    for n in 0..instances {
        for loss in [Loss::Photometric, Loss::Classification] {
            let inst = random_instance(&mut rng, loss);
            let grads = analytic(&inst, loss);
            let fd = |field: &mut FieldParams, get: &dyn Fn(&mut FieldParams) -> &mut f64| {
                let orig = *get(field);
                *get(field) = orig + STEP;
                let up = loss_value(&inst, field, loss);
                *get(field) = orig - STEP;
                let down = loss_value(&inst, field, loss);
                *get(field) = orig;
                (up - down) / (2.0 * STEP)
            };
            let via_footprint = (loss == Loss::Classification && inst.mode == ColorMode::RenderLogits)
                .then(|| footprint_logits(&inst));
            let mut field = inst.field.clone();
            for i in 0..field.density.len() {
                let num = fd(&mut field, &|f| &mut f.density[i]);
                check(&mut report, &format!("#{n} {loss:?} density"), i, grads.density[i], num);
                let num = fd(&mut field, &|f| &mut f.luminance[i]);
                check(&mut report, &format!("#{n} {loss:?} luminance"), i, grads.luminance[i], num);
            }
            for k in 0..field.logits.len() {
                let num = fd(&mut field, &|f| &mut f.logits[k]);
                check(&mut report, &format!("#{n} {loss:?} {:?} logits", inst.mode), k, grads.logits[k], num);
                if let Some(fp) = &via_footprint {
                    check(&mut report, &format!("#{n} footprint logits"), k, fp[k], num);
                }
            }
        }
        report.instances += 1;
    }
    report
}
