// temporary loss decomposition
use tagsep::data::{build_dataset, DatasetConfig, SplitCounts};
use tagsep::dsp::{stft, StftConfig};
use tagsep::models::train::{pretrain_autoencoder, AutoencoderTrainConfig};
use tagsep::models::{decode, encode, LatentCode, SPECTRAL_LOG_FLOOR};

fn main() {
    let ae_data_cfg = DatasetConfig {
        train: SplitCounts { singles_per_kind: 25, pairs: 75 },
        val: SplitCounts { singles_per_kind: 4, pairs: 20 },
        test: SplitCounts { singles_per_kind: 1, pairs: 0 },
        ..DatasetConfig::default()
    };
    let ds = build_dataset(&ae_data_cfg).unwrap();
    let epochs: usize = std::env::var("AE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(24);
    let cfg = AutoencoderTrainConfig { epochs, lr: 2e-3, batch_size: 4, lr_decay: 1.0, ..AutoencoderTrainConfig::default() };
    let (ae, stats) = pretrain_autoencoder(&ds, &cfg).unwrap();
    println!("ratio {:.3} floor {SPECTRAL_LOG_FLOOR}", stats.loss_ratio);

    // decompose per scale over the val split, quantized path
    for &fft in &[256usize, 512, 1024] {
        let scfg = StftConfig::new(fft, fft / 2).unwrap();
        let (mut lin, mut logt, mut hazefrac, mut nclips) = (0.0, 0.0, 0.0, 0);
        for clip in &ds.val {
            let e = encode(&ae, &clip.audio).unwrap();
            let xhat = decode(&ae, &LatentCode::new(e.values).unwrap(), true).unwrap();
            let mx = stft(&clip.audio, scfg).unwrap().magnitude();
            let mh = stft(&xhat, scfg).unwrap().magnitude();
            let n = mx.len() as f64;
            lin += mx.data().iter().zip(mh.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            logt += mx.data().iter().zip(mh.data())
                .map(|(a, b)| ((b + SPECTRAL_LOG_FLOOR).ln() - (a + SPECTRAL_LOG_FLOOR).ln()).abs())
                .sum::<f64>() / n;
            // haze: fraction of bins where |X| is quiet but |Xhat| exceeds it 3x
            let quiet = mx.data().iter().zip(mh.data()).filter(|(a, _)| **a < 0.05).count();
            let haze = mx.data().iter().zip(mh.data()).filter(|(a, b)| **a < 0.05 && **b > 3.0 * **a + 0.01).count();
            hazefrac += haze as f64 / quiet.max(1) as f64;
            nclips += 1;
        }
        let nc = nclips as f64;
        println!("fft {fft}: lin {:.3} log {:.3} haze-frac {:.3}", lin / nc, logt / nc, hazefrac / nc);
    }
    // magnitude scale reference
    let clip = &ds.val[0];
    let m = stft(&clip.audio, StftConfig::new(1024, 512).unwrap()).unwrap().magnitude();
    let mut v: Vec<f64> = m.data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("mag percentiles fft1024: p50 {:.4} p90 {:.3} p99 {:.2} max {:.1}", v[v.len()/2], v[(v.len() as f64*0.9) as usize], v[(v.len() as f64*0.99) as usize], v[v.len()-1]);
}
