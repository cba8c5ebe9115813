// temporary calibration harness (parameterized via env vars)
use std::time::Instant;

use tagsep::data::{build_dataset, make_mixture, two_source_eval_spec, DatasetConfig, SourceKind, SplitCounts, TagVector};
use tagsep::eval::{irm_oracle, sdr_improvement};
use tagsep::models::train::{pretrain_autoencoder, pretrain_tagger, rescale_latent_space, AutoencoderTrainConfig, TaggerTrainConfig};
use tagsep::models::TaggerArch;
use tagsep::separation::{separate, FrozenModels, SeparationConfig};
use tagsep::dsp::StftConfig;

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let ae_epochs = envf("AE_EPOCHS", 20.0) as usize;
    let ae_lr = envf("AE_LR", 1e-3);
    let ae_batch = envf("AE_BATCH", 8.0) as usize;
    let n_runs = envf("RUNS", 8.0) as u64;
    let gammas: Vec<f64> = std::env::var("GAMMAS")
        .unwrap_or_else(|_| "24".to_string())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    println!("ae_epochs={ae_epochs} ae_lr={ae_lr} ae_batch={ae_batch} gammas={gammas:?}");

    let t0 = Instant::now();
    let ae_data_cfg = DatasetConfig {
        train: SplitCounts { singles_per_kind: 25, pairs: 75 },
        val: SplitCounts { singles_per_kind: 4, pairs: 20 },
        test: SplitCounts { singles_per_kind: 1, pairs: 0 },
        ..DatasetConfig::default()
    };
    let ae_data = build_dataset(&ae_data_cfg).unwrap();

    let ae_cfg = AutoencoderTrainConfig {
        epochs: ae_epochs,
        lr: ae_lr,
        batch_size: ae_batch,
        lr_decay: envf("AE_DECAY", 0.3),
        ..AutoencoderTrainConfig::default()
    };
    let (ae_base, ae_stats) = pretrain_autoencoder(&ae_data, &ae_cfg).unwrap();
    println!(
        "[{:6.1?}] ae: ratio {:.3} ({:.2} -> quant {:.2} / cont {:.2}), usage {:.2}",
        t0.elapsed(),
        ae_stats.loss_ratio,
        ae_stats.initial_val_loss,
        ae_stats.final_val_loss,
        ae_stats.final_val_loss_continuous,
        ae_stats.codebook_usage
    );
    for row in ae_stats.curve.iter().rev().take(3).rev() {
        println!(
            "    epoch {:2}: train {:.3} val {:.3} quant {:.3} usage {:.2}",
            row.epoch, row.train_loss, row.val_loss, row.val_loss_quantized, row.codebook_usage
        );
    }
    if std::env::var("SKIP_SEP").is_ok() {
        return;
    }

    let tg_data = build_dataset(&DatasetConfig::default()).unwrap();
    let tg_cfg = TaggerTrainConfig { epochs: 12, ..TaggerTrainConfig::default() };
    let (tg, tg_stats) = pretrain_tagger(&tg_data, TaggerArch::FcnMini, &tg_cfg).unwrap();
    println!("[{:6.1?}] tagger: macro AUC {:.4}", t0.elapsed(), tg_stats.macro_auc);

    for &gamma in &gammas {
        let mut ae = ae_base.clone();
        rescale_latent_space(&mut ae, gamma);
        let models = FrozenModels { autoencoder: &ae, tagger: &tg };
        let cfg = SeparationConfig::default();

        let mut descents = 0;
        let mut pos_sdri = 0;
        let mut sdris = Vec::new();
        let mut oracles = Vec::new();
        for i in 0..n_runs {
            let spec = two_source_eval_spec(
                (SourceKind::TonalHarmonic, 5000 + i),
                (SourceKind::Percussive, 6000 + i),
                4.0,
                8000,
            )
            .unwrap();
            let mix = make_mixture(&spec).unwrap();
            let target =
                TagVector::multi_hot(&tg_data.vocab, &[SourceKind::Percussive.index()]).unwrap();
            let r = separate(&mix.mixture, &target, &models, &cfg).unwrap();
            let first = r.loss_history.first().copied().unwrap();
            let last = r.loss_history.last().copied().unwrap();
            if last < first {
                descents += 1;
            }
            let sdri_sbar = sdr_improvement(&mix.stems[1], &mix.mixture, &r.s_bar).unwrap();
            if sdri_sbar > 0.0 {
                pos_sdri += 1;
            }
            sdris.push(sdri_sbar);
            let oracle =
                irm_oracle(&mix.stems, &mix.mixture, StftConfig::new(1024, 256).unwrap()).unwrap();
            oracles.push(oracle[1]);
            if i < 4 {
                let hist: Vec<String> = r.loss_history.iter().map(|l| format!("{l:.3}")).collect();
                println!("  g{gamma} run {i}: [{}] sdri {:+.2}", hist.join(" "), sdri_sbar);
            }
        }
        let mean_sdri = sdris.iter().sum::<f64>() / sdris.len() as f64;
        let mean_oracle = oracles.iter().sum::<f64>() / oracles.len() as f64;
        println!(
            "[{:6.1?}] gamma {gamma}: descents {descents}/{n_runs} sdri+ {pos_sdri}/{n_runs} mean sdri {mean_sdri:+.2} mean oracle {mean_oracle:+.1}",
            t0.elapsed()
        );
    }
}
