use feedersim::algebraic::AdmittanceState;
use feedersim::cases::builtin_case;
use feedersim::dynsim::{simulate_from, SimModel, SimOptions, SimState, Termination};
use feedersim::homotopy::find_all_solutions;
use feedersim::net::Network;
use feedersim::ConstraintSet;
use nalgebra::DVector;
use std::sync::mpsc;
use std::time::Duration;

fn zip_eval(
    model: &SimModel,
    g: f64,
    b: f64,
    warm: &AdmittanceState,
) -> Option<(f64, AdmittanceState)> {
    let x = DVector::from_vec(vec![g, b]);
    model.eval(&x, &[], warm).map(|e| (e.voltages[1].norm(), e.y))
}

fn zip_settle(
    model: &SimModel,
    g: f64,
    b: f64,
    warm: &AdmittanceState,
) -> Option<(f64, f64, AdmittanceState)> {
    let x = DVector::from_vec(vec![g, b]);
    model
        .eval_settled(&x, &[], warm)
        .map(|e| (e.voltages[1].norm(), e.voltages[6].norm(), e.y))
}

fn anchors(net: &Network) -> (AdmittanceState, AdmittanceState) {
    let targets = ConstraintSet::from_network(net);
    let sols = find_all_solutions(net, &targets);
    let s1 = sols.iter().find(|(_, vs)| (vs.vmag(2) - 1.1426).abs() < 0.01).unwrap();
    let s2 = sols.iter().find(|(_, vs)| (vs.vmag(2) - 0.6918).abs() < 0.01).unwrap();
    (s1.0.clone(), s2.0.clone())
}

#[test]
#[ignore]
fn map_sheets() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (y1, y2) = anchors(net);

    let gs: Vec<f64> = (0..36).map(|i| -14.0 + 0.4 * i as f64).collect();
    let bs: Vec<f64> = (0..16).map(|i| -0.5 + 0.25 * i as f64).collect();

    println!("per cell 'ab': a = warm from S1, b = warm from S2");
    println!("codes: H >0.9, M 0.5-0.9, L 0.2-0.5, l <0.2, . no solve");
    let code = |r: &Option<(f64, AdmittanceState)>| -> char {
        match r {
            None => '.',
            Some((v2, _)) => {
                if *v2 > 0.9 {
                    'H'
                } else if *v2 > 0.5 {
                    'M'
                } else if *v2 > 0.2 {
                    'L'
                } else {
                    'l'
                }
            }
        }
    };
    print!("        ");
    for &g in &gs {
        print!("{:>3}", (g * 10.0).round() as i64 / 10);
    }
    println!();
    for &b in bs.iter().rev() {
        let mut row = String::new();
        for &g in &gs {
            let ra = zip_eval(&model, g, b, &y1);
            let rb = zip_eval(&model, g, b, &y2);
            row.push(code(&ra));
            row.push(code(&rb));
            row.push(' ');
        }
        println!("b={:+.2} {}", b, row);
    }
}

#[test]
#[ignore]
fn consumption_side() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (y1, y2) = anchors(net);

    // Walk sheet A rightward (consumption) warm-chained by plain eval.
    let b2 = 0.16;
    let mut warm = y1.clone();
    println!("-- sheet A rightward, b2={b2} --");
    let mut g = -0.6;
    while g <= 4.01 {
        match zip_eval(&model, g, b2, &warm) {
            Some((v2, y)) => {
                let v7 = {
                    let x = DVector::from_vec(vec![g, b2]);
                    model.eval(&x, &[], &warm).unwrap().voltages[6].norm()
                };
                println!("g={g:6.2}  V2={v2:.4}  V7={v7:.4}  (A)");
                warm = y;
            }
            None => {
                println!("g={g:6.2}  NO SOLVE from A-warm");
                break;
            }
        }
        g += 0.2;
    }

    // Walk sheet B rightward from S2, warm-chained.
    println!("-- sheet B rightward from S2 realization --");
    let mut warm = y2.clone();
    let mut g = -1.8;
    while g <= 4.01 {
        match zip_eval(&model, g, b2, &warm) {
            Some((v2, y)) => {
                let x = DVector::from_vec(vec![g, b2]);
                let v7 = model.eval(&x, &[], &warm).unwrap().voltages[6].norm();
                println!("g={g:6.2}  V2={v2:.4}  V7={v7:.4}");
                warm = y;
            }
            None => {
                println!("g={g:6.2}  NO SOLVE from B-warm");
                break;
            }
        }
        g += 0.2;
    }

    // Fast stability of B: settle from S2's own realization at S2's (g2,b2).
    println!("-- settle checks --");
    let g2_s2 = -0.85 / (0.6918f64 * 0.6918);
    let b2_s2 = 0.1 / (0.6918f64 * 0.6918);
    match zip_settle(&model, g2_s2, b2_s2, &y2) {
        Some((v2, v7, _)) => println!("settle from B at S2 realization: V2={v2:.4} V7={v7:.4}"),
        None => println!("settle from B at S2 realization: FAILED"),
    }
    // Settle from B-warm at S1's (g2,b2): does B exist and attract there?
    match zip_settle(&model, -0.6511, 0.0766, &y2) {
        Some((v2, v7, _)) => println!("settle from B at S1 realization: V2={v2:.4} V7={v7:.4}"),
        None => println!("settle from B at S1 realization: FAILED"),
    }
    // Settle from A-warm at consumption states.
    for g in [0.5, 0.8, 1.2, 1.6, 2.0, 2.4] {
        match zip_settle(&model, g, b2, &y1) {
            Some((v2, v7, _)) => println!("settle from A at g={g}: V2={v2:.4} V7={v7:.4}"),
            None => println!("settle from A at g={g}: FAILED"),
        }
    }
}

#[test]
#[ignore]
fn b2_direction() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (y1, y2) = anchors(net);

    for g2 in [-0.6511, 0.3, 0.78] {
        println!("-- walk A upward in b2 at g2={g2} --");
        let mut warm = y1.clone();
        let mut b = 0.08;
        let mut last_a_warm = y1.clone();
        while b <= 12.0 {
            match zip_eval(&model, g2, b, &warm) {
                Some((v2, y)) => {
                    last_a_warm = y.clone();
                    warm = y;
                    if (b * 4.0).round() == b * 4.0 {
                        println!("  b={b:6.2}  V2={v2:.4}");
                    }
                }
                None => {
                    println!("  b={b:6.2}  A DIED");
                    // What does the fast flow do just past the edge?
                    for bb in [b, b + 0.1, b + 0.3] {
                        match zip_settle(&model, g2, bb, &last_a_warm) {
                            Some((v2, v7, _)) => {
                                println!("  settle at b={bb:.2}: V2={v2:.4} V7={v7:.4}")
                            }
                            None => println!("  settle at b={bb:.2}: FAILED"),
                        }
                    }
                    break;
                }
            }
            b += 0.05;
        }
    }

    println!("-- walk B upward in b2 at g2=-0.6511 --");
    let mut warm = y2.clone();
    // First bring B to g2=-0.6511 at its native b2.
    if let Some((_, y)) = zip_eval(&model, -0.6511, 0.209, &warm) {
        warm = y;
    }
    let mut b = 0.2;
    while b <= 12.0 {
        match zip_eval(&model, -0.6511, b, &warm) {
            Some((v2, y)) => {
                warm = y;
                if (b * 2.0).round() == b * 2.0 {
                    let s = match zip_settle(&model, -0.6511, b, &warm) {
                        Some((v2s, _, _)) => format!("settle V2={v2s:.4}"),
                        None => "settle FAILED".into(),
                    };
                    println!("  b={b:6.2}  V2={v2:.4}  {s}");
                }
            }
            None => {
                println!("  b={b:6.2}  B DIED");
                break;
            }
        }
        b += 0.05;
    }
}

#[test]
#[ignore]
fn sheet_b_fast_stability() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (_, y2) = anchors(net);

    // Walk B both directions from S2's realization, and at each point run
    // the settle from B's own (walked) warm. Convergence back to B means
    // the fast layer holds B there; anything else bounds the stable window.
    let b2 = 0.209;
    for dir in [-1.0f64, 1.0] {
        let mut warm = y2.clone();
        let mut g = -1.776;
        println!("-- direction {dir} --");
        loop {
            match zip_eval(&model, g, b2, &warm) {
                Some((v2_newton, y)) => {
                    warm = y;
                    match zip_settle(&model, g, b2, &warm) {
                        Some((v2, v7, _)) => {
                            let tag = if (v2 - v2_newton).abs() < 1e-3 { "B-held" } else { "LEFT" };
                            println!("g={g:7.2}  newton V2={v2_newton:.4}  settle V2={v2:.4} V7={v7:.4}  {tag}");
                        }
                        None => println!("g={g:7.2}  newton V2={v2_newton:.4}  settle FAILED"),
                    }
                }
                None => {
                    println!("g={g:7.2}  B newton walk ended");
                    break;
                }
            }
            g += dir * 0.25;
            if !(-12.0..=4.0).contains(&g) {
                break;
            }
        }
    }
}

#[test]
#[ignore]
fn edge_crossing() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (y1, _) = anchors(net);

    // Walk left along sheet A at fixed b, warm-chaining; report what the warm
    // Newton does when the sheet ends.
    for &b in &[0.3, 0.6, 1.0, 1.28, 1.6] {
        let mut warm = y1.clone();
        let mut g = -8.0;
        println!("b={b}");
        loop {
            match zip_eval(&model, g, b, &warm) {
                Some((v2, y)) => {
                    let v6 = {
                        let x = DVector::from_vec(vec![g, b]);
                        model.eval(&x, &[], &warm).unwrap().voltages[5].norm()
                    };
                    println!("  g={:.3} V2={:.4} V6={:.4}", g, v2, v6);
                    warm = y;
                }
                None => {
                    println!("  g={:.3} NO SOLVE", g);
                    break;
                }
            }
            g -= 0.05;
            if g < -11.5 {
                break;
            }
        }
    }
}

#[test]
#[ignore]
fn map_basin_sheet2() {
    let case = builtin_case("thirteen_bus").unwrap();
    let net = &case.network;
    let model = SimModel::new(net);
    let (_, y2) = anchors(net);

    println!("start on sheet B where it exists: 1=S1 2=S2 X=collapse F=fail T=timeout ?=other");
    let gs: Vec<f64> = (0..25).map(|i| -12.0 + 0.5 * i as f64).collect();
    let bs: Vec<f64> = (0..9).map(|i| 0.25 * i as f64).collect();
    for &b in bs.iter().rev() {
        let mut row = String::new();
        for &g in &gs {
            let c = match zip_eval(&model, g, b, &y2) {
                None => ' ',
                Some((_, y)) => {
                    let netc = net.clone();
                    let (tx, rx) = mpsc::channel();
                    std::thread::spawn(move || {
                        let mut m = SimModel::new(&netc);
                        let state = SimState {
                            t: 0.0,
                            x: DVector::from_vec(vec![g, b]),
                            modes: vec![],
                            warm: y,
                        };
                        let traj =
                            simulate_from(&mut m, state, &[], 2.0, 0.5, &SimOptions::default());
                        let out = match traj.termination {
                            Termination::Completed => {
                                let v2 = traj.last().voltages[1].norm();
                                if (v2 - 1.1426).abs() < 0.02 {
                                    '1'
                                } else if (v2 - 0.6918).abs() < 0.02 {
                                    '2'
                                } else if v2 < 0.05 {
                                    'X'
                                } else {
                                    '?'
                                }
                            }
                            Termination::Collapsed { .. } => 'X',
                            Termination::Failed { .. } => 'F',
                        };
                        let _ = tx.send(out);
                    });
                    rx.recv_timeout(Duration::from_secs(3)).unwrap_or('T')
                }
            };
            row.push(c);
        }
        println!("b={:+.2} {}", b, row);
    }
}
