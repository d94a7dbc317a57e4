use std::cell::RefCell;
use std::rc::Rc;
use std::time::Instant;

use dif_core::dataset::{generate_dataset, GenConfig};
use dif_core::hyperexec::{apply_batched, build_layout, ApplySite, ExecMode};
use dif_core::nets::{compose, decode, discriminate, encode, head, HeadKind, Model, ModelSpec, HeadSpec, ParamGroup};
use dif_core::rng::Stream;
use dif_core::systems::SystemId;
use dif_core::tensor::{Array, Tape};

fn main() {
    let b = 32;
    let (t_c, t, d) = (33, 100, 2);
    let spec = ModelSpec::desk_scale(2);
    let mut rng = Stream::seed_from_u64(1);
    let model = Model::init(spec, &mut rng);
    let windows = Array::from_vec(&[b, t_c, d], (0..b*t_c*d).map(|_| rng.normal()).collect());
    let states = Array::from_vec(&[b, t, d], (0..b*t*d).map(|_| rng.normal()).collect());
    let targets = Array::from_vec(&[b, t, d], (0..b*t*d).map(|_| rng.normal()).collect());
    let labels: Vec<usize> = (0..b).map(|i| i % 4).collect();
    let layout = build_layout(&spec.deriv);
    let exec_full = ApplySite::new(layout.clone(), ExecMode::ReferenceBased, b);
    let exec_inv = ApplySite::new(layout, ExecMode::ReferenceBased, b);

    let n = 30;
    let mut t_fwd_enc = 0.0; let mut t_heads = 0.0; let mut t_exec = 0.0; let mut t_loss = 0.0; let mut t_bwd = 0.0;
    for _ in 0..n {
        let mut tape = Tape::new();
        tape.set_finite_check(false);
        let vars = model.register(&mut tape, &ParamGroup::HYPERNET);
        let xp = tape.constant(windows.clone());
        let xs = tape.constant(states.clone());
        let tg = tape.constant(targets.clone());
        let s0 = Instant::now();
        let z = encode(&mut tape, &model, &vars, xp).unwrap();
        let s1 = Instant::now();
        let zc = head(&mut tape, &model, &vars, HeadKind::Invariant, z).unwrap();
        let ze = head(&mut tape, &model, &vars, HeadKind::Environment, z).unwrap();
        let zf = compose(&mut tape, zc, ze).unwrap();
        let ff = decode(&mut tape, &model, &vars, zf).unwrap();
        let fi = decode(&mut tape, &model, &vars, zc).unwrap();
        let s2 = Instant::now();
        let pf = apply_batched(&mut tape, &exec_full, ff, xs).unwrap();
        let pi = apply_batched(&mut tape, &exec_inv, fi, xs).unwrap();
        let s3 = Instant::now();
        let d1 = tape.sub(pf, tg).unwrap();
        let q1 = tape.mul(d1, d1).unwrap();
        let l1 = tape.sum(q1).unwrap();
        let d2 = tape.sub(pi, tg).unwrap();
        let q2 = tape.mul(d2, d2).unwrap();
        let l2 = tape.sum(q2).unwrap();
        let lg = discriminate(&mut tape, &model, &vars, zc).unwrap();
        let nll = tape.cross_entropy_logits(lg, &labels).unwrap();
        let lsum0 = tape.add(l1, l2).unwrap();
        let lsum = tape.add(lsum0, nll).unwrap();
        let s4 = Instant::now();
        let _g = tape.backward(lsum).unwrap();
        let s5 = Instant::now();
        t_fwd_enc += (s1-s0).as_secs_f64(); t_heads += (s2-s1).as_secs_f64();
        t_exec += (s3-s2).as_secs_f64(); t_loss += (s4-s3).as_secs_f64(); t_bwd += (s5-s4).as_secs_f64();
    }
    let k = n as f64;
    println!("enc-fwd {:.1}ms heads+dec {:.1}ms exec-fwd {:.1}ms loss {:.1}ms backward {:.1}ms",
        t_fwd_enc/k*1e3, t_heads/k*1e3, t_exec/k*1e3, t_loss/k*1e3, t_bwd/k*1e3);
    let _ = (Rc::new(()), RefCell::new(0), generate_dataset(&GenConfig::new(SystemId::Pendulum, 7)));
}
