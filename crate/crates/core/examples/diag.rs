// scratch diagnostic
use knowsafe_core::prednet::*;
use knowsafe_core::types::*;

fn ramp(start: f64, slope: f64, len: usize) -> Trajectory {
    Trajectory {
        states: (0..len).map(|t| SystemState::new(start + slope * t as f64, 1.0, t as u32)).collect(),
        actions: (0..len).map(|_| ControlAction { rate: 1.0, kind: ActionKind::KeepInsulin }).collect(),
    }
}

fn main() {
    let cfg = SeqModelConfig { window: 4, horizon: 4, hidden: (6, 4) };
    let hyper = TrainHyper { epochs: 60, learning_rate: 5e-3, max_windows_per_epoch: Some(400), ..TrainHyper::default() };
    let spec = ReachableSetSpec::default();
    let corpus = vec![ramp(150.0, 2.5, 60), ramp(130.0, 0.0, 60), ramp(170.0, 1.0, 60)];
    let (short, curve) = train(&corpus, cfg, &spec, &hyper).unwrap();
    println!("first {:?} last {:?}", curve.first().unwrap(), curve.last().unwrap());
    for t0 in [8, 10, 11] {
        let states: Vec<SystemState> = (0..4).map(|i| SystemState::new(152.0 + 2.5 * (t0 + i) as f64, 1.0, (t0 + i) as u32)).collect();
        let actions: Vec<ControlAction> = (0..4).map(|_| ControlAction { rate: 1.0, kind: ActionKind::KeepInsulin }).collect();
        let pred = predict(&short, &states, &actions).unwrap();
        println!("t0={t0} last_bg={} pred={:?}", states[3].bg, pred.iter().map(|p| p.0.round()).collect::<Vec<_>>());
    }
}
