use pyrstyle::extractor::{Extractor, LayerTag, VggVariant};
use pyrstyle::losses::{
    draft_loss, mean_variance_loss, perceptual_loss, remd_loss, self_similarity_loss, FeatureVectors, LayerSchedule,
    LossWeights,
};
use pyrstyle::Image;

fn pattern(seed: f32) -> Image {
    Image::from_fn(32, 32, |c, y, x| {
        (((x as f32 + 3.0 * c as f32) * 0.37 * seed).sin() * ((y as f32) * 0.23 + seed).cos()) * 0.5 + 0.5
    })
}

#[test]
fn identical_output_without_style_terms_costs_nothing() {
    let ex = Extractor::random(VggVariant::Vgg16, 2);
    let content = pattern(1.0);
    let weights = LossWeights {
        alpha: 0.0,
        ..Default::default()
    };
    let b = draft_loss(
        &ex,
        &content,
        &pattern(2.0),
        &content,
        &weights,
        &LayerSchedule::default(),
    )
    .unwrap();
    assert_eq!(b.perceptual, 0.0);
    assert_eq!(b.self_similarity, 0.0);
    assert_eq!(b.total(&weights), 0.0);
}

#[test]
fn total_recombines_from_per_layer_terms() {
    let ex = Extractor::random(VggVariant::Vgg16, 3);
    let (content, style, output) = (pattern(1.0), pattern(2.5), pattern(1.7));
    let schedule = LayerSchedule::default();
    let weights = LossWeights::default();
    let b = draft_loss(&ex, &content, &style, &output, &weights, &schedule).unwrap();

    let feats = |img: &Image| ex.extract(img, &LayerTag::ALL).unwrap();
    let (fc, fs, fo) = (feats(&content), feats(&style), feats(&output));
    let fv = |set: &pyrstyle::extractor::FeatureSet, t: LayerTag| FeatureVectors::<f64>::from_feature_map(&set[&t], 0);
    let sum = |tags: &[LayerTag], f: &dyn Fn(LayerTag) -> f64| tags.iter().map(|&t| f(t)).sum::<f64>();
    let remd = sum(&schedule.remd, &|t| remd_loss(&fv(&fs, t), &fv(&fo, t)).unwrap());
    let ss = sum(&schedule.self_similarity, &|t| {
        self_similarity_loss(&fv(&fc, t), &fv(&fo, t)).unwrap()
    });
    let mv = sum(&schedule.mean_variance, &|t| {
        mean_variance_loss(&fv(&fs, t), &fv(&fo, t)).unwrap()
    });
    let p = sum(&schedule.perceptual, &|t| {
        perceptual_loss(&fv(&fc, t), &fv(&fo, t)).unwrap()
    });

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    assert!(close(b.remd, remd), "{} vs {}", b.remd, remd);
    assert!(close(b.self_similarity, ss), "{} vs {}", b.self_similarity, ss);
    assert!(close(b.mean_variance, mv), "{} vs {}", b.mean_variance, mv);
    assert!(close(b.perceptual, p), "{} vs {}", b.perceptual, p);
    let expected = (p + 16.0 * ss) + 3.0 * (mv + 3.0 * remd);
    assert!(close(b.total(&weights), expected));
}

#[test]
fn mismatched_resolutions_are_rejected() {
    let ex = Extractor::random(VggVariant::Vgg16, 4);
    let small = Image::filled(16, 16, 0.5);
    let err = draft_loss(
        &ex,
        &pattern(1.0),
        &small,
        &pattern(1.0),
        &LossWeights::default(),
        &LayerSchedule::default(),
    );
    assert!(matches!(err, Err(pyrstyle::Error::Dimension(_))));
}
