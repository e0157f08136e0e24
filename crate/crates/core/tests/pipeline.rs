use slatmorph::assets::{AssetDescriptor, Family};
use slatmorph::flow::{CrossMode, FrameCache, ModelConfig, SelfMode, ToyFlowModel};
use slatmorph::pipeline::config::MorphFile;
use slatmorph::pipeline::output::{run_to_dir, RunOptions, CACHE_FILE};
use slatmorph::pipeline::{
    morph, morph_disentangled, style_transfer, AlphaMode, MorphConfig, MorphObject, MorphSequence,
};
use slatmorph::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        layers: 2,
        timesteps: 4,
        ..ModelConfig::default()
    }
}

fn config(steps: usize) -> MorphConfig {
    MorphConfig {
        steps,
        model: small_model(),
        ..MorphConfig::default()
    }
}

fn object(family: Family) -> MorphObject {
    let mut d = AssetDescriptor::new(family);
    d.resolution = 8;
    d.length = 6;
    d.width = 2;
    d.height = 2;
    let cond = d.condition_tokens(&small_model()).unwrap();
    MorphObject::new(family.name(), cond)
}

fn same_frames(a: &MorphSequence, b: &MorphSequence) -> bool {
    a.frames.len() == b.frames.len()
        && a.frames.iter().zip(&b.frames).all(|(x, y)| {
            x.structure == y.structure
                && x.slat == y.slat
                && x.rotation == y.rotation
                && x.alpha == y.alpha
        })
}

#[test]
fn sequences_have_n_plus_one_frames_and_are_deterministic() {
    let cfg = config(6);
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let (bar, tee) = (object(Family::Bar), object(Family::Tee));
    let a = morph(&model, &bar, &tee, &cfg).unwrap();
    let b = morph(&model, &bar, &tee, &cfg).unwrap();
    assert_eq!(a.frames.len(), 7);
    assert!(same_frames(&a, &b));
    let alphas: Vec<f64> = a.frames.iter().map(|f| f.alpha.value()).collect();
    assert_eq!(alphas.first(), Some(&0.0));
    assert_eq!(alphas.last(), Some(&1.0));
    assert!(alphas.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn morphing_an_object_into_itself_is_constant() {
    let cfg = config(5);
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let bar = object(Family::Bar);
    let seq = morph(&model, &bar, &bar, &cfg).unwrap();
    for f in &seq.frames[1..] {
        assert_eq!(f.structure, seq.frames[0].structure, "frame {}", f.index);
        assert_eq!(f.slat, seq.frames[0].slat, "frame {}", f.index);
        assert_eq!(f.rotation, 0);
    }
}

#[test]
fn seeds_change_the_noise() {
    let cfg = config(2);
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let (bar, cross) = (object(Family::Bar), object(Family::Cross));
    let a = morph(&model, &bar, &cross, &cfg).unwrap();
    let b = morph(&model, &bar, &cross, &MorphConfig { seed: 99, ..cfg }).unwrap();
    assert!(!same_frames(&a, &b));
}

#[test]
fn frozen_structure_stage_keeps_the_source_shape() {
    let cfg = MorphConfig {
        ss_alpha: AlphaMode::Frozen0,
        ..config(4)
    };
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let seq = morph_disentangled(&model, &object(Family::Bar), &object(Family::Ell), &cfg).unwrap();
    for f in &seq.frames {
        assert_eq!(f.structure, seq.frames[0].structure);
        assert_eq!(f.alpha_ss.value(), 0.0);
    }
    assert_ne!(seq.frames[0].slat, seq.frames[4].slat);
}

#[test]
fn frozen_latent_stage_still_moves_the_structure() {
    let cfg = MorphConfig {
        slat_alpha: AlphaMode::Frozen1,
        ..config(4)
    };
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let seq =
        morph_disentangled(&model, &object(Family::Bar), &object(Family::Cross), &cfg).unwrap();
    assert!(seq.frames.iter().all(|f| f.alpha_slat.value() == 1.0));
    assert_ne!(seq.frames[0].structure, seq.frames[4].structure);
}

#[test]
fn disentangled_needs_exactly_one_frozen_stage() {
    let model = ToyFlowModel::new(small_model()).unwrap();
    let (a, b) = (object(Family::Bar), object(Family::Tee));
    let err = morph_disentangled(&model, &a, &b, &config(2)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    let both = MorphConfig {
        ss_alpha: AlphaMode::Frozen0,
        slat_alpha: AlphaMode::Frozen1,
        ..config(2)
    };
    assert!(matches!(
        morph_disentangled(&model, &a, &b, &both),
        Err(Error::NothingMorphs)
    ));
}

#[test]
fn style_transfer_keeps_the_source_structure() {
    let cfg = config(3);
    let model = ToyFlowModel::new(cfg.model.clone()).unwrap();
    let src = object(Family::Bar);
    let mut style_desc = AssetDescriptor::new(Family::Bar);
    style_desc.resolution = 8;
    style_desc.length = 6;
    style_desc.width = 2;
    style_desc.height = 2;
    style_desc.color_seed = 5;
    let style = MorphObject::new(
        "style",
        style_desc.condition_tokens(&small_model()).unwrap(),
    );
    let seq = style_transfer(&model, &src, &style, &cfg).unwrap();
    let plain = morph(&model, &src, &src, &cfg).unwrap();
    for f in &seq.frames {
        assert_eq!(f.structure, plain.frames[0].structure);
    }
    assert_eq!(seq.frames[0].slat, plain.frames[0].slat);
    assert_ne!(seq.frames[3].slat, plain.frames[3].slat);
}

#[test]
fn alternative_attention_modes_run() {
    let model = ToyFlowModel::new(small_model()).unwrap();
    let (a, b) = (object(Family::Bar), object(Family::Cross));
    for (cross, self_mode) in [
        (CrossMode::KvFused, SelfMode::KvFused),
        (CrossMode::VanillaSrc, SelfMode::Vanilla),
        (CrossMode::VanillaTgt, SelfMode::Tfsa),
    ] {
        let mut cfg = config(2);
        cfg.attn.cross_mode = cross;
        cfg.attn.self_mode = self_mode;
        let seq = morph(&model, &a, &b, &cfg).unwrap();
        assert_eq!(seq.frames.len(), 3, "{cross:?}/{self_mode:?}");
    }
    let mut cfg = config(2);
    cfg.attn.cross_layers = Some(vec![true, false]);
    assert_eq!(morph(&model, &a, &b, &cfg).unwrap().frames.len(), 3);
    cfg.attn.cross_layers = Some(vec![true]);
    assert!(morph(&model, &a, &b, &cfg).is_err());
}

fn write_objects(dir: &std::path::Path) {
    for f in [Family::Bar, Family::Tee] {
        std::fs::write(
            dir.join(format!("{}.ctok", f.name())),
            object(f).cond.to_bytes(),
        )
        .unwrap();
    }
}

const SMALL_TOML: &str = r#"
source = "bar.ctok"
target = "tee.ctok"
steps = 6

[model]
resolution = 8
layers = 2
timesteps = 4
"#;

#[test]
fn resume_continues_where_the_run_stopped() {
    let dir = tempfile::tempdir().unwrap();
    write_objects(dir.path());
    let loaded = MorphFile::parse(SMALL_TOML)
        .unwrap()
        .resolve(dir.path(), None)
        .unwrap();
    let model = ToyFlowModel::new(loaded.config.model.clone()).unwrap();
    let out = dir.path().join("run");
    let stop = RunOptions {
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let first = run_to_dir(&model, &loaded, &out, stop).unwrap();
    assert_eq!((first.first, first.written), (0, 3));

    let bytes = std::fs::read(out.join(CACHE_FILE)).unwrap();
    let (frame, cache) = FrameCache::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(frame, 2);
    assert!(cache.ss.is_some() && cache.slat.is_some());

    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let second = run_to_dir(&model, &loaded, &out, resume).unwrap();
    assert_eq!((second.first, second.written), (3, 4));
    let indices: Vec<usize> = second.sequence.frames.iter().map(|f| f.index).collect();
    assert_eq!(indices, (0..=6).collect::<Vec<_>>());

    let other = MorphFile::parse(&SMALL_TOML.replace("steps = 6", "steps = 7"))
        .unwrap()
        .resolve(dir.path(), None)
        .unwrap();
    assert!(run_to_dir(&model, &other, &out, resume).is_err());
}

#[test]
fn frozen_stage_keeps_no_cache() {
    let dir = tempfile::tempdir().unwrap();
    write_objects(dir.path());
    let text = format!("ss_alpha = \"frozen_0\"\n{SMALL_TOML}");
    let loaded = MorphFile::parse(&text)
        .unwrap()
        .resolve(dir.path(), None)
        .unwrap();
    let model = ToyFlowModel::new(loaded.config.model.clone()).unwrap();
    let out = dir.path().join("run");
    let stop = RunOptions {
        stop_after: Some(1),
        ..RunOptions::default()
    };
    run_to_dir(&model, &loaded, &out, stop).unwrap();
    let bytes = std::fs::read(out.join(CACHE_FILE)).unwrap();
    let (_, cache) = FrameCache::read_from(&mut bytes.as_slice()).unwrap();
    assert!(cache.ss.is_none() && cache.slat.is_some());
}

#[test]
fn seed_override_beats_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_objects(dir.path());
    let f = MorphFile::parse(&format!("seed = 3\n{SMALL_TOML}")).unwrap();
    assert_eq!(f.resolve(dir.path(), None).unwrap().config.seed, 3);
    assert_eq!(f.resolve(dir.path(), Some(11)).unwrap().config.seed, 11);
    let plain = MorphFile::parse(SMALL_TOML).unwrap();
    assert_eq!(plain.resolve(dir.path(), None).unwrap().config.seed, 7);
}

#[test]
fn style_key_sets_up_style_transfer() {
    let dir = tempfile::tempdir().unwrap();
    write_objects(dir.path());
    let text = SMALL_TOML.replace("target = \"tee.ctok\"", "style = \"tee.ctok\"");
    let loaded = MorphFile::parse(&text)
        .unwrap()
        .resolve(dir.path(), None)
        .unwrap();
    assert!(loaded.style);
    assert_eq!(loaded.config.ss_alpha, AlphaMode::Frozen0);
    assert_eq!(loaded.inputs.ss_target, loaded.inputs.source);
    assert_eq!(loaded.inputs.slat_target.name, "tee");

    let both = format!("target = \"bar.ctok\"\n{text}");
    assert!(MorphFile::parse(&both)
        .unwrap()
        .resolve(dir.path(), None)
        .is_err());
}
