// Scratch diagnostic: train one cell at a chosen mu2 and print the stain
// confusion matrix plus lesion behaviour. Not part of the deliverable.

use shortcut_probe_core::model::{Model, ModelConfig, TrunkConfig, TrunkKind};
use shortcut_probe_core::rng::{derive_seed, stream};
use shortcut_probe_core::synth::{generate, group_split, Dataset, GenSpec, SplitPlan};
use shortcut_probe_core::objectives::{LossWeights, StainMode};
use shortcut_probe_core::train::{batch_tensor, test_indices, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mu2: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(-1.0);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2400);
    let ps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(12);
    let widths: Vec<usize> = args
        .get(4)
        .map(|s| s.split(',').map(|w| w.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![4, 8]);
    let fd: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(16);
    let hh: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(12);
    let kappa: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let max_epochs: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(50);
    let dropout: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let batch: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(32);
    let noise: f64 = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let trunk_gain: f64 = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let mut spec = GenSpec {
        n_patches: n,
        patch_size: ps,
        confound_rho: 0.0,
        lesion_signal_strength: kappa,
        noise_sigma: noise,
        ..GenSpec::default()
    };
    if std::env::var("DIAG_WIDE_PALETTES").is_ok() {
        spec.stain_palettes.colors = [
            [0.85, 0.15, 0.55],
            [0.15, 0.25, 0.85],
            [0.15, 0.80, 0.25],
            [0.85, 0.75, 0.15],
        ];
    }
    if let Ok(props) = std::env::var("DIAG_PROPS") {
        let v: Vec<f64> = props.split(',').map(|s| s.parse().unwrap()).collect();
        spec.stain_props = [v[0], v[1], v[2], v[3]];
    }
    let patches = generate(&spec).unwrap();
    let split_seed = derive_seed(spec.seed, &[stream::SPLIT]);
    let plan = group_split(&patches, &SplitPlan::default(), split_seed).unwrap();
    let data = Dataset::new(patches).unwrap();

    let kind = if std::env::var("DIAG_DENSE").is_ok() { TrunkKind::Dense } else { TrunkKind::Conv };
    let config = ModelConfig {
        trunk: TrunkConfig {
            kind,
            widths,
            input_shape: data.shape(),
            feature_dim: fd,
            init_gain: trunk_gain,
        },
        head_hidden: hh,
        dropout_rate: dropout,
    };
    let weights = LossWeights { mu1: 1.0, mu2, stain_mode: StainMode::SupervisedCe };
    let train_cfg = TrainConfig { max_epochs, batch_size: batch, ..TrainConfig::default() };

    let seed: u64 = std::env::var("DIAG_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let fold: usize = std::env::var("DIAG_FOLD").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let model_seed = derive_seed(seed, &[stream::PARAM_INIT, fold as u64]);
    let model = Model::dual(config, model_seed).unwrap();

    if std::env::var("DIAG_INIT_PROBE").is_ok() {
        use shortcut_probe_core::layers::{ExecCtx, ParamBinds};
        use shortcut_probe_core::tensor::Tape;
        let probe_idx: Vec<usize> = (0..256.min(data.len())).collect();
        let xt = batch_tensor(&data, &probe_idx).unwrap();
        let mut tape = Tape::new();
        let mut ctx = ExecCtx::deterministic();
        let mut binds = ParamBinds::new();
        let x = tape.leaf_detached(&xt);
        let feats = model.features(&mut tape, &mut ctx, &mut binds, x).unwrap();
        let fshape = tape.shape(feats).to_vec();
        let fvals = tape.value(feats).to_vec();
        let rows = fshape[0];
        let dims = fshape[1];
        let mut fmean = 0.0;
        let mut fmax: f64 = 0.0;
        for &v in &fvals {
            fmean += v;
            fmax = fmax.max(v.abs());
        }
        fmean /= fvals.len() as f64;
        let out = model.forward_heads(&mut tape, &mut ctx, &mut binds, feats).unwrap();
        let slog = tape.value(out.stain_logits).to_vec();
        let llog = tape.value(out.lesion_logits.unwrap()).to_vec();
        let stat = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            let mx = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            (mean, var.sqrt(), mx)
        };
        let (sm, ss, sx) = stat(&slog);
        let (lm, ls, lx) = stat(&llog);
        println!(
            "init probe: feats [{} x {}] mean {:.4} maxabs {:.4}",
            rows, dims, fmean, fmax
        );
        println!("  stain logits mean {:.4} std {:.4} maxabs {:.4}", sm, ss, sx);
        println!("  lesion logits mean {:.4} std {:.4} maxabs {:.4}", lm, ls, lx);
        let mut gapmax: f64 = 0.0;
        let mut gapsum = 0.0;
        for r in 0..rows {
            let row = &slog[r * 4..(r + 1) * 4];
            let hi = row.iter().fold(f64::MIN, |a, &b| a.max(b));
            let lo = row.iter().fold(f64::MAX, |a, &b| a.min(b));
            gapmax = gapmax.max(hi - lo);
            gapsum += hi - lo;
        }
        println!("  stain logit gap mean {:.4} max {:.4}", gapsum / rows as f64, gapmax);
    }

    let train_seed = derive_seed(seed, &[fold as u64]);
    let t0 = std::time::Instant::now();
    let (model, history) =
        train(model, &data, &plan, fold, &weights, &train_cfg, train_seed).unwrap();
    eprintln!(
        "trained {} epochs in {:.1}s (best {})",
        history.epochs.len(),
        t0.elapsed().as_secs_f64(),
        history.best_epoch
    );

    // Deterministic (no-dropout) predictions on the test set, plus MC means.
    let test_idx = test_indices(&data, &plan);
    let mut stain_conf = [[0usize; 4]; 4];
    let mut lesion_conf = [[0usize; 2]; 2];
    let mut stain_prob_sum = [[0.0f64; 4]; 4];
    let mut per_class = [0usize; 4];
    let mut lesion_unc_sum = 0.0f64;
    let mut stain_unc_sum = 0.0f64;
    let eval_seed = derive_seed(seed, &[stream::MC_PASS, fold as u64]);
    for (chunk_no, chunk) in test_idx.chunks(256).enumerate() {
        let x = batch_tensor(&data, chunk).unwrap();
        let chunk_seed = derive_seed(eval_seed, &[chunk_no as u64]);
        let batch = model.mc_predict_batch(&x, 50, chunk_seed).unwrap();
        for (j, &i) in chunk.iter().enumerate() {
            let sl = data.stain_uncounted(i);
            let ll = data.lesion(i);
            let sp = &batch.stain[j].mean_probs;
            let lp = &batch.lesion.as_ref().unwrap()[j].mean_probs;
            let s_pred = (0..4).max_by(|&a, &b| sp[a].total_cmp(&sp[b])).unwrap();
            let l_pred = (lp[1] > 0.5) as usize;
            stain_conf[sl][s_pred] += 1;
            lesion_conf[ll][l_pred] += 1;
            for k in 0..4 {
                stain_prob_sum[sl][k] += sp[k];
            }
            per_class[sl] += 1;
            lesion_unc_sum += batch.lesion.as_ref().unwrap()[j].uncertainty;
            stain_unc_sum += batch.stain[j].uncertainty;
        }
    }
    // Parameter magnitudes: detect bias runaway and dead trunks.
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let d = p.data();
        let maxabs = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        println!("param {:<28} rms {:>9.4} maxabs {:>9.4}", name, norm, maxabs);
    }
    // Trunk liveness: per-dimension std of features across one test chunk.
    {
        let xt = batch_tensor(&data, &test_idx[..test_idx.len().min(256)]).unwrap();
        let mut ctx = shortcut_probe_core::layers::ExecCtx::deterministic();
        let mut tape = shortcut_probe_core::tensor::Tape::new();
        let mut binds = shortcut_probe_core::layers::ParamBinds::new();
        let x = tape.leaf_detached(&xt);
        let feats = model.features(&mut tape, &mut ctx, &mut binds, x).unwrap();
        let shape = tape.shape(feats).to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let fd = tape.value(feats).to_vec();
        let mut live = 0;
        let mut max_sd = 0.0f64;
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| fd[r * cols + c]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            let sd = var.sqrt();
            if sd > 1e-6 {
                live += 1;
            }
            max_sd = max_sd.max(sd);
        }
        println!("trunk features: {}/{} live dims, max std {:.4}", live, cols, max_sd);
        // Eta-squared per dim: between-class variance over total, for stain
        // and lesion labels. High max eta2 means the label is linearly visible.
        for (what, labels) in [
            ("stain", test_idx[..rows].iter().map(|&i| data.stain_uncounted(i)).collect::<Vec<_>>()),
            ("lesion", test_idx[..rows].iter().map(|&i| data.lesion(i)).collect::<Vec<_>>()),
        ] {
            let k = labels.iter().max().unwrap() + 1;
            let mut max_eta = 0.0f64;
            let mut mean_eta = 0.0f64;
            for c in 0..cols {
                let col: Vec<f64> = (0..rows).map(|r| fd[r * cols + c]).collect();
                let mean = col.iter().sum::<f64>() / rows as f64;
                let total: f64 =
                    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
                if total < 1e-12 {
                    continue;
                }
                let mut between = 0.0;
                for cls in 0..k {
                    let vals: Vec<f64> = col
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == cls)
                        .map(|(v, _)| *v)
                        .collect();
                    if vals.is_empty() {
                        continue;
                    }
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    between += vals.len() as f64 / rows as f64 * (m - mean) * (m - mean);
                }
                let eta = between / total;
                max_eta = max_eta.max(eta);
                mean_eta += eta / cols as f64;
            }
            println!("  {} eta2: max {:.3} mean {:.3}", what, max_eta, mean_eta);
        }
    }
    println!("stain confusion (rows = true, cols = pred):");
    for (sl, row) in stain_conf.iter().enumerate() {
        let total: usize = row.iter().sum();
        let mean_probs: Vec<String> = (0..4)
            .map(|k| format!("{:.3}", stain_prob_sum[sl][k] / per_class[sl] as f64))
            .collect();
        println!(
            "  true {}: {:?} (n={}) mean MC probs [{}]",
            sl,
            row,
            total,
            mean_probs.join(", ")
        );
    }
    let correct: usize = (0..4).map(|k| stain_conf[k][k]).sum();
    let total: usize = test_idx.len();
    println!("stain acc {:.4}", correct as f64 / total as f64);
    println!("lesion confusion (rows = true, cols = pred): {:?}", lesion_conf);
    let lcorrect = lesion_conf[0][0] + lesion_conf[1][1];
    println!("lesion acc {:.4}", lcorrect as f64 / total as f64);
    println!(
        "mean MC uncertainty: lesion {:.5} stain {:.5}",
        lesion_unc_sum / total as f64,
        stain_unc_sum / total as f64
    );
    let last = history.epochs.last().unwrap();
    println!(
        "last epoch: val_loss {:.4} stain_ce {:?} stain_acc {:?} lesion_acc {:?} wnorm {:.4}",
        last.val_loss,
        last.val_stain_ce,
        &last.val_stain_acc,
        &last.val_lesion_acc,
        last.stain_weight_norm
    );
    if std::env::var("DIAG_TRAJ").is_ok() {
        for (i, ep) in history.epochs.iter().enumerate() {
            println!(
                "  ep {:2} val_loss {:9.4} stain_ce {:8.4} stain_acc {:.3} lesion_acc {:.3} wnorm {:.3} lr {:.6}",
                i,
                ep.val_loss,
                ep.val_stain_ce.unwrap_or(f64::NAN),
                ep.val_stain_acc.unwrap_or(f64::NAN),
                ep.val_lesion_acc.unwrap_or(f64::NAN),
                ep.stain_weight_norm,
                ep.lr
            );
        }
    }
}
