use probekd::cache::{encoded_len, CacheError, HiddenStateCache, HSC_HEADER_LEN};
use probekd::numkern::{DenseMatrix, Linear, Mlp};
use probekd::probes::{decode_probe, encode_probe, ProbeError, ProbeModel, ProbeNet, Standardizer};
use proptest::prelude::*;

fn any_f32s(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix<f32>> {
    any_f32s(rows * cols).prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

prop_compose! {
    fn arb_cache()(n in 0usize..6, l in 1usize..4, d in 1usize..5, c in 2usize..5, m in 1usize..4, pc in any::<bool>())
        (features in matrix(n, l * d), logits in matrix(n, c), inputs in matrix(n, m),
         labels in prop::collection::vec(0..c as u32, n),
         per_choice in if pc { matrix(n * c, l * d).prop_map(Some).boxed() } else { Just(None).boxed() },
         l in Just(l), d in Just(d), c in Just(c))
        -> HiddenStateCache {
        HiddenStateCache {
            n_layers: l,
            hidden_dim: d,
            n_classes: c,
            features,
            labels,
            teacher_logits: logits,
            student_inputs: inputs,
            per_choice,
        }
    }
}

fn linear(inputs: usize, outputs: usize) -> impl Strategy<Value = Linear<f32>> {
    (matrix(outputs, inputs), any_f32s(outputs)).prop_map(|(weight, bias)| Linear { weight, bias })
}

prop_compose! {
    fn arb_probe()(kind in 0u8..3, source in 1usize..5, dim in 1usize..4, c in 2usize..5, hidden in 1usize..5,
                   tau in 0.1f64..5.0, mask in any::<u8>())
        (layers in Just({
            let v: Vec<usize> = (0..source).filter(|i| mask & (1 << i) != 0).collect();
            if v.is_empty() { vec![source - 1] } else { v }
        }).prop_flat_map(move |layers| {
            let width = layers.len() * dim;
            let outs = if kind == 2 { 1 } else { c };
            let net = match kind {
                0 => linear(width, c).prop_map(ProbeNet::Logistic).boxed(),
                k => (linear(width, hidden), linear(hidden, outs))
                    .prop_map(move |(h, o)| {
                        let m = Mlp { hidden: h, output: o };
                        if k == 1 { ProbeNet::Mlp(m) } else { ProbeNet::Ccs(m) }
                    })
                    .boxed(),
            };
            let scale = prop::collection::vec(1e-3f32..1e3, width);
            (Just(layers), any_f32s(width), scale, net)
        }), source in Just(source), dim in Just(dim), c in Just(c), tau in Just(tau))
        -> ProbeModel {
        let (layers, mean, scale, net) = layers;
        ProbeModel {
            n_classes: c,
            source_layers: source,
            layer_dim: dim,
            layers,
            standardizer: Standardizer { mean, scale },
            net,
            tau,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_round_trips_bitwise(cache in arb_cache()) {
        let bytes = cache.to_bytes().unwrap();
        prop_assert_eq!(
            bytes.len(),
            encoded_len(cache.n_examples(), cache.n_layers, cache.hidden_dim, cache.n_classes,
                        cache.student_dim(), cache.has_per_choice())
        );
        let back = HiddenStateCache::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.labels, cache.labels);
    }

    #[test]
    fn truncated_caches_are_rejected(cache in arb_cache(), cut in 0.0f64..1.0) {
        let bytes = cache.to_bytes().unwrap();
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(HiddenStateCache::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn probe_round_trips_bitwise(probe in arb_probe()) {
        let bytes = encode_probe(&probe).unwrap();
        let back = decode_probe(&bytes).unwrap();
        prop_assert_eq!(encode_probe(&back).unwrap(), bytes);
        prop_assert_eq!(back.kind(), probe.kind());
        prop_assert_eq!(back.tau, probe.tau);
    }

    #[test]
    fn truncated_or_padded_probes_are_rejected(probe in arb_probe(), cut in 0.0f64..1.0) {
        let bytes = encode_probe(&probe).unwrap();
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_probe(&bytes[..keep]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(decode_probe(&longer).is_err());
    }
}

fn tiny() -> HiddenStateCache {
    HiddenStateCache {
        n_layers: 2,
        hidden_dim: 3,
        n_classes: 2,
        features: DenseMatrix::from_vec(1, 6, vec![1.0; 6]).unwrap(),
        labels: vec![1],
        teacher_logits: DenseMatrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap(),
        student_inputs: DenseMatrix::from_vec(1, 2, vec![2.0, 3.0]).unwrap(),
        per_choice: None,
    }
}

#[test]
fn size_formula_is_exact() {
    assert_eq!(HSC_HEADER_LEN, 36);
    assert_eq!(encoded_len(0, 2, 3, 2, 2, false), 36);
    assert_eq!(tiny().to_bytes().unwrap().len(), 36 + 4 + 8 + 24 + 8);
    assert_eq!(encoded_len(1, 2, 3, 2, 2, true), 80 + 2 * 6 * 4);
}

#[test]
fn corrupted_headers_are_rejected() {
    let good = tiny().to_bytes().unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(HiddenStateCache::from_bytes(&magic), Err(CacheError::BadMagic(_))));
    let mut version = good.clone();
    version[4] = 2;
    assert!(matches!(HiddenStateCache::from_bytes(&version), Err(CacheError::UnsupportedVersion(2))));
    let mut flags = good.clone();
    flags[8] = 0b10;
    assert!(matches!(HiddenStateCache::from_bytes(&flags), Err(CacheError::UnknownFlags(_))));
    let mut claims_choices = good.clone();
    claims_choices[8] = 1;
    assert!(matches!(
        HiddenStateCache::from_bytes(&claims_choices),
        Err(CacheError::Truncated { section: "per_choice", .. })
    ));
    let mut bad_label = good;
    bad_label[36] = 7;
    assert!(matches!(HiddenStateCache::from_bytes(&bad_label), Err(CacheError::Invalid(_))));
}

#[test]
fn corrupted_probe_headers_are_rejected() {
    let probe = ProbeModel {
        n_classes: 2,
        source_layers: 1,
        layer_dim: 2,
        layers: vec![0],
        standardizer: Standardizer::identity(2),
        net: ProbeNet::Logistic(Linear::zeros(2, 2)),
        tau: 2.0,
    };
    let good = encode_probe(&probe).unwrap();
    let mut magic = good.clone();
    magic[3] = b'9';
    assert!(matches!(decode_probe(&magic), Err(ProbeError::Format(_))));
    let mut kind = good.clone();
    kind[8] = 9;
    assert!(matches!(decode_probe(&kind), Err(ProbeError::Format(_))));
}
