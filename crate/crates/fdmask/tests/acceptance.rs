//! End-to-end acceptance checks, one per release criterion. Every test
//! prints a single verdict line (run with `--nocapture` to see them all):
//!
//! ```text
//! cargo test -p fdmask --test acceptance -- --nocapture
//! ```
//!
//! The toy-scale recognition runs (criteria 5-7) share one set of artifacts
//! built on first use; the other criteria are self-contained.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fdmask::dataset::{generate_faces, SyntheticFaceSpec};
use fdmask::dictionary::{
    binarize, zero_count_for, DictEntry, Fdm, MaskDictionary, MeanMask,
};
use fdmask::experiment::{median, run_toy, ToyProtocol, ToyReport, ToyWorld};
use fdmask::grid::{BlockId, GridSpec};
use fdmask::matcher::{
    apply_variant, compose_fdm, identify, identify_plain, masked_embed, Gallery, MaskVariant,
    ProbeContext,
};
use fdmask::pdsn::{MaskGenerator, MaskGeneratorConfig, PairFeatures};
use fdmask::trunk::{FeatureShape, TrunkConfig, TrunkNet};

fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number} ({name}): {tag} — {detail}");
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

// --- shared toy-scale artifacts (criteria 5-7) -----------------------------

struct ToyOutcome {
    report: ToyReport,
    seconds: f64,
}

static TOY: OnceLock<ToyOutcome> = OnceLock::new();

fn toy() -> &'static ToyOutcome {
    TOY.get_or_init(|| {
        let start = Instant::now();
        let report =
            run_toy::<f32>(&ToyProtocol::default(), &[1, 2, 3]).expect("toy protocol runs");
        ToyOutcome {
            report,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

// --- criterion 1: binarization against a full-sort oracle ------------------

/// Independent oracle: sort flat indices by (value, index) and zero the
/// first `z`.
fn sort_oracle(values: &[f32], z: usize) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut bits = vec![1u8; values.len()];
    for &i in &idx[..z] {
        bits[i] = 0;
    }
    bits
}

#[test]
fn criterion_01_binarization_matches_sort_oracle() {
    let start = Instant::now();
    // Thresholds as exact twentieths so the expected zero count has an
    // integer-arithmetic definition: floor(num * K / 20).
    let taus: [(f64, usize); 6] = [
        (0.0, 0),
        (0.05, 1),
        (0.15, 3),
        (0.25, 5),
        (0.35, 7),
        (0.45, 9),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    let mut checked = 0usize;
    let mut max_k = 0usize;
    for case in 0..1000 {
        let (c, h, w) = if case % 50 == 0 {
            (25, 20, 20) // exactly 10_000 elements
        } else {
            (
                rng.random_range(1..=12usize),
                rng.random_range(1..=25usize),
                rng.random_range(1..=25usize),
            )
        };
        let k = c * h * w;
        max_k = max_k.max(k);
        let mut values = Array3::<f32>::zeros((c, h, w));
        for v in values.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        if case % 3 == 0 {
            // Heavy ties: quantize to eight levels.
            values.mapv_inplace(|v| (v * 8.0).floor() / 8.0);
        }
        if case % 100 == 7 {
            // Full tie: every element equal.
            values.fill(0.5);
        }
        let mean = MeanMask::new(values.clone(), 4).unwrap();
        let (tau, num) = taus[case % taus.len()];
        let z = num * k / 20;
        assert_eq!(
            zero_count_for(tau, k),
            z,
            "zero count for tau {tau}, K {k} disagrees with integer oracle"
        );
        let fdm = binarize(&mean, tau).unwrap();
        let expect = sort_oracle(values.as_slice().unwrap(), z);
        assert_eq!(
            fdm.bits().as_slice().unwrap(),
            expect.as_slice(),
            "bit pattern diverges from the sort oracle (tau {tau}, shape {c}x{h}x{w})"
        );
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "top-quantile binarization matches a full-sort oracle",
        checked == 1000 && secs < 10.0,
        &format!("{checked} masks, K up to {max_k}, exact bit equality, {secs:.2}s (budget 10s)"),
    );
}

// --- criterion 2: binary mask composition algebra ---------------------------

#[test]
fn criterion_02_mask_and_composition_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0002);
    let mut cases = 0usize;
    for _ in 0..1000 {
        let dims = (
            rng.random_range(1..=4usize),
            rng.random_range(1..=6usize),
            rng.random_range(1..=6usize),
        );
        let density = rng.random_range(0.1..0.9);
        let mut random_fdm = || {
            Fdm::new(Array3::from_shape_fn(dims, |_| {
                u8::from(rng.random_bool(density))
            }))
            .unwrap()
        };
        let a = random_fdm();
        let b = random_fdm();
        let c = random_fdm();
        let shape = FeatureShape {
            channels: dims.0,
            height: dims.1,
            width: dims.2,
        };
        let ones = Fdm::ones(shape);
        let zeros = Fdm::new(Array3::zeros(dims)).unwrap();

        // Commutative, associative, idempotent; identity and absorbing
        // elements.
        assert_eq!(a.and(&b).unwrap().bits(), b.and(&a).unwrap().bits());
        assert_eq!(
            a.and(&b).unwrap().and(&c).unwrap().bits(),
            a.and(&b.and(&c).unwrap()).unwrap().bits()
        );
        assert_eq!(a.and(&a).unwrap().bits(), a.bits());
        assert_eq!(a.and(&ones).unwrap().bits(), a.bits());
        assert!(a.and(&zeros).unwrap().bits().iter().all(|&x| x == 0));

        // Element-count oracle: a kept position is one kept by both.
        let both = a
            .bits()
            .iter()
            .zip(b.bits().iter())
            .filter(|(&x, &y)| x == 1 && y == 1)
            .count();
        assert_eq!(a.and(&b).unwrap().ones_count(), both);
        cases += 1;
    }
    // Mismatched shapes refuse to compose.
    let a = Fdm::ones(FeatureShape {
        channels: 2,
        height: 3,
        width: 3,
    });
    let b = Fdm::ones(FeatureShape {
        channels: 2,
        height: 3,
        width: 4,
    });
    assert!(a.and(&b).is_err());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "binary mask composition is a bounded-lattice AND",
        cases == 1000 && secs < 5.0,
        &format!("{cases} random triples plus shape-mismatch rejection, {secs:.2}s (budget 5s)"),
    );
}

// --- criterion 3: analytic gradients vs finite differences -----------------

#[test]
fn criterion_03_generator_gradients_match_finite_differences() {
    let start = Instant::now();
    let cfg = TrunkConfig {
        input_channels: 1,
        image_height: 12,
        image_width: 12,
        conv_widths: vec![4, 4],
        embedding_dim: 6,
        class_count: 3,
        scale: 8.0,
        margin: 0.2,
        epochs: 1,
        batch_size: 4,
        learning_rate: 0.01,
        lr_step_epochs: vec![],
        lr_step_factor: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        seed: 31,
    };
    let trunk = TrunkNet::<f64>::new(cfg).unwrap();
    let shape = trunk.feature_shape();
    assert_eq!(shape.dims(), (4, 3, 3), "gradcheck wants C=4 maps of 3x3");

    let mut gen = MaskGenerator::<f64>::new(
        MaskGeneratorConfig {
            hidden_width: 3,
            ..MaskGeneratorConfig::for_block(BlockId::new(13), 41)
        },
        shape,
        trunk.id().clone(),
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);
    let mut feats = Vec::new();
    for label in 0..3u32 {
        let clean = Array3::from_shape_fn(shape.dims(), |_| rng.random_range(-1.0..1.0));
        let occluded = clean.mapv(|c| c + rng.random_range(-0.8..0.8));
        feats.push(PairFeatures {
            clean,
            occluded,
            label,
        });
    }
    let batch: Vec<&PairFeatures<f64>> = feats.iter().collect();

    let (_, analytic) = gen.loss_gradients(&trunk, &batch).unwrap();
    let params = gen.parameters();
    assert_eq!(analytic.len(), params.len());
    assert!(
        analytic.iter().any(|g| g.abs() > 1e-6),
        "gradient is identically zero; the check would be vacuous"
    );

    let eps = 1e-5;
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += eps;
        gen.set_parameters(&plus).unwrap();
        let lp = gen.loss_gradients(&trunk, &batch).unwrap().0.total;
        let mut minus = params.clone();
        minus[i] -= eps;
        gen.set_parameters(&minus).unwrap();
        let lm = gen.loss_gradients(&trunk, &batch).unwrap().0.total;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (1.0 + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "generator loss gradients match central differences",
        max_rel <= 1e-3 && secs < 60.0,
        &format!(
            "{} parameters, worst relative error {max_rel:.2e} (bound 1e-3), {secs:.2}s (budget 60s)",
            params.len()
        ),
    );
}

// --- criterion 4: unoccluded probes pass through bitwise -------------------

#[test]
fn criterion_04_unoccluded_probes_pass_bitwise() {
    let start = Instant::now();
    let cfg = TrunkConfig {
        input_channels: 1,
        image_height: 20,
        image_width: 20,
        conv_widths: vec![4, 8],
        embedding_dim: 8,
        class_count: 3,
        ..TrunkConfig::default()
    };
    let trunk = TrunkNet::<f32>::new(cfg).unwrap();
    let shape = trunk.feature_shape();
    let grid = GridSpec::new(20, 20, 5).unwrap();

    // A dictionary with random entries: transparency must not depend on the
    // mask contents, only on the absence of occluded central blocks.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0004);
    let entries: BTreeMap<u32, DictEntry<f32>> = grid
        .central_blocks()
        .into_iter()
        .map(|b| {
            let mean = MeanMask::new(
                Array3::from_shape_fn(shape.dims(), |_| rng.random_range(0.0f32..1.0)),
                8,
            )
            .unwrap();
            let fdm = binarize(&mean, 0.25).unwrap();
            (
                b.index(),
                DictEntry {
                    fdm,
                    mean: Some(mean),
                },
            )
        })
        .collect();
    let dict = MaskDictionary::from_entries(0.25, shape, trunk.id().clone(), entries).unwrap();

    let faces = generate_faces::<f32>(&SyntheticFaceSpec {
        identities: 3,
        images_per_identity: 2,
        image_height: 20,
        image_width: 20,
        seed: 9,
    })
    .unwrap();

    // Gallery = first image per identity, probes = second.
    let gallery_pairs: Vec<_> = (0..3).map(|i| faces.entry(i * 2)).collect();
    let gallery = Gallery::new(
        &trunk,
        &gallery_pairs
            .iter()
            .map(|e| (e.face.as_ref(), e.identity))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let probe_entries: Vec<_> = (0..3).map(|i| faces.entry(i * 2 + 1)).collect();

    // Route 1: the masked pipeline with empty occlusion evidence.
    let contexts: Vec<ProbeContext<f32>> = probe_entries
        .iter()
        .map(|e| {
            ProbeContext::unoccluded(&dict, &grid, Arc::clone(&e.face), e.identity).unwrap()
        })
        .collect();
    for ctx in &contexts {
        assert!(ctx.blocks().is_empty());
        assert!(ctx.fdm().is_all_ones());
    }
    let masked = identify(&trunk, &dict, &grid, &contexts, &gallery, MaskVariant::Binary).unwrap();

    // Route 2: the plain pipeline with no mask arithmetic anywhere.
    let plain_probes: Vec<_> = probe_entries
        .iter()
        .map(|e| (e.face.as_ref(), e.identity))
        .collect();
    let plain = identify_plain(&trunk, &plain_probes, &gallery).unwrap();

    let mut scores_bitwise = true;
    for (m, p) in masked.rankings.iter().zip(plain.rankings.iter()) {
        assert_eq!(m.predicted_identity, p.predicted_identity);
        for (a, b) in m.ranking.iter().zip(p.ranking.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            scores_bitwise &= a.2.to_bits() == b.2.to_bits();
        }
    }

    // Embedding-level check: an all-ones mask leaves every float untouched.
    let mut embeddings_bitwise = true;
    for e in &probe_entries {
        let plain_emb = trunk.forward_embedding(&e.face).unwrap();
        let masked_emb = masked_embed(&trunk, &e.face, &Fdm::ones(shape)).unwrap();
        embeddings_bitwise &= plain_emb
            .values()
            .iter()
            .zip(masked_emb.values().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    // Volume-level check: every variant composes the empty set to exact ones.
    let empty = std::collections::BTreeSet::new();
    let mut volumes_exact = compose_fdm(&dict, &grid, &empty).unwrap().is_all_ones();
    for variant in [MaskVariant::Binary, MaskVariant::Soft, MaskVariant::SoftBinary] {
        let v = apply_variant(&dict, &grid, &empty, variant).unwrap();
        volumes_exact &= v.iter().all(|&x| x == 1.0);
    }

    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "unoccluded probes produce bitwise-identical results",
        scores_bitwise && embeddings_bitwise && volumes_exact,
        &format!(
            "rankings, scores, embeddings, and composed volumes identical across the masked and \
             plain routes, {secs:.2}s"
        ),
    );
}

// --- criteria 5-7: toy-scale end-to-end recognition -------------------------

#[test]
fn criterion_05_masked_matching_beats_plain_and_generic_finetune() {
    let protocol = ToyProtocol::default();
    assert!(protocol.identities >= 50);
    assert!(protocol.images_per_identity >= 20);
    assert!((protocol.occluder_area_fraction - 0.25).abs() < 1e-12);

    let outcome = toy();
    let report = &outcome.report;
    let ordered = report.seeds.iter().all(|s| {
        s.occluded_fdm_rank1 >= s.occluded_baseline_rank1
            && s.occluded_baseline_rank1 >= s.occluded_plain_rank1
    });
    let improvements: Vec<f64> = report
        .seeds
        .iter()
        .map(|s| s.occluded_fdm_rank1 - s.occluded_baseline_rank1)
        .collect();
    let median_improvement = median(&improvements);
    let fdm = report.median_of(|s| s.occluded_fdm_rank1);
    let base = report.median_of(|s| s.occluded_baseline_rank1);
    let plain = report.median_of(|s| s.occluded_plain_rank1);
    verdict(
        5,
        "masked matching beats plain and occlusion-finetuned baselines",
        ordered && median_improvement >= 0.01 && outcome.seconds < 7200.0,
        &format!(
            "medians over 3 seeds: masked {fdm:.3} >= finetuned {base:.3} >= plain {plain:.3}, \
             median improvement {:.1} points (needs >= 1.0), pipeline took {:.0}s (budget 2h)",
            median_improvement * 100.0,
            outcome.seconds
        ),
    );
}

#[test]
fn criterion_06_differential_term_lifts_occluded_accuracy() {
    let report = &toy().report;
    let with = report.median_of(|s| s.occluded_fdm_pre_rank1);
    let without = report.median_of(|s| s.occluded_lambda0_rank1);
    verdict(
        6,
        "pairwise differential term lifts occluded accuracy",
        without <= with,
        &format!(
            "medians over 3 seeds, before any finetune: differential off {without:.3} <= on {with:.3}"
        ),
    );
}

#[test]
fn criterion_07_mask_weighting_variants_rank_as_expected() {
    let report = &toy().report;
    let binary = report.median_of(|s| s.occluded_fdm_rank1);
    let soft = report.median_of(|s| s.occluded_soft_rank1);
    let soft_binary = report.median_of(|s| s.occluded_soft_binary_rank1);
    let gap = (soft_binary - binary).abs();
    verdict(
        7,
        "hard discarding beats soft weighting; thresholded weighting matches",
        soft <= binary && gap <= 0.01,
        &format!(
            "medians over 3 seeds: soft {soft:.3} <= binary {binary:.3}; \
             |soft+binary {soft_binary:.3} - binary| = {:.1} points (needs <= 1.0)",
            gap * 100.0
        ),
    );
}

// --- criterion 8: occlusion perturbs features locally and unevenly ---------

#[test]
fn criterion_08_occlusion_perturbs_features_locally_and_unevenly() {
    let start = Instant::now();
    let world = ToyWorld::<f32>::build(&ToyProtocol::default(), 1).expect("toy world builds");
    let (split, cv) = world.med_structure(64).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let nonvacuous = split.covered_positions > 0 && split.uncovered_positions > 0;
    verdict(
        8,
        "feature change concentrates on covered receptive fields",
        nonvacuous && split.ratio() >= 1.5 && cv > 0.2 && secs < 300.0,
        &format!(
            "covered mean {:.3e} over {} positions vs uncovered {:.3e} over {} (ratio {:.3}, \
             needs >= 1.5); channel-mean spread {cv:.3} (needs > 0.2); {secs:.0}s (budget 5min)",
            split.covered_mean,
            split.covered_positions,
            split.uncovered_mean,
            split.uncovered_positions,
            split.ratio()
        ),
    );
}

// --- criterion 9: persistence round-trips byte-exactly ----------------------

#[test]
fn criterion_09_checkpoints_round_trip_byte_exact() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0009);

    let trunk = TrunkNet::<f32>::new(TrunkConfig {
        input_channels: 1,
        image_height: 20,
        image_width: 20,
        conv_widths: vec![4, 8],
        embedding_dim: 8,
        class_count: 5,
        ..TrunkConfig::default()
    })
    .unwrap();
    let shape = trunk.feature_shape();

    let generator = MaskGenerator::<f32>::new(
        MaskGeneratorConfig::for_block(BlockId::new(13), 7),
        shape,
        trunk.id().clone(),
    )
    .unwrap();

    let grid = GridSpec::new(20, 20, 5).unwrap();
    let entries: BTreeMap<u32, DictEntry<f32>> = grid
        .central_blocks()
        .into_iter()
        .map(|b| {
            let mean = MeanMask::new(
                Array3::from_shape_fn(shape.dims(), |_| rng.random_range(0.0f32..1.0)),
                16,
            )
            .unwrap();
            let fdm = binarize(&mean, 0.25).unwrap();
            (
                b.index(),
                DictEntry {
                    fdm,
                    mean: Some(mean),
                },
            )
        })
        .collect();
    let dict = MaskDictionary::from_entries(0.25, shape, trunk.id().clone(), entries).unwrap();

    // Save, reload, save again: the files must be byte-identical and the
    // reloaded artifacts must re-serialize to the original bytes.
    let trunk_path = dir.path().join("trunk.bin");
    let gen_path = dir.path().join("generator.bin");
    let dict_path = dir.path().join("dictionary.bin");
    let id_a = trunk.save(&trunk_path).unwrap();
    let id_b = generator.save(&gen_path).unwrap();
    let id_c = dict.save(&dict_path).unwrap();

    let trunk2 = TrunkNet::<f32>::load(&trunk_path).unwrap();
    let gen2 = MaskGenerator::<f32>::load(&gen_path).unwrap();
    let dict2 = MaskDictionary::<f32>::load(&dict_path).unwrap();

    let trunk_ok = trunk2.to_bytes() == trunk.to_bytes() && *trunk2.id() == id_a;
    let gen_ok = gen2.to_bytes() == generator.to_bytes() && *gen2.id() == id_b;
    let dict_ok = dict2.to_bytes() == dict.to_bytes() && dict2.id() == id_c;

    let trunk2_path = dir.path().join("trunk2.bin");
    let gen2_path = dir.path().join("generator2.bin");
    let dict2_path = dir.path().join("dictionary2.bin");
    trunk2.save(&trunk2_path).unwrap();
    gen2.save(&gen2_path).unwrap();
    dict2.save(&dict2_path).unwrap();
    let files_ok = std::fs::read(&trunk_path).unwrap() == std::fs::read(&trunk2_path).unwrap()
        && std::fs::read(&gen_path).unwrap() == std::fs::read(&gen2_path).unwrap()
        && std::fs::read(&dict_path).unwrap() == std::fs::read(&dict2_path).unwrap();

    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        "checkpoints round-trip byte-exactly",
        trunk_ok && gen_ok && dict_ok && files_ok,
        &format!(
            "trunk, generator, and dictionary each reload to identical bytes and identical \
             content ids, {secs:.2}s"
        ),
    );
}
