use umif::config::RunConfig;
use umif::eval::{check_view_counts, score, summarize, EvalRow};

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let config = RunConfig::default();
    for s in umif::dataset::generate(9, 6, 16, 32).unwrap() {
        let sc = score(&s.voxel, &s.voxel, &config, s.seed).unwrap();
        assert_eq!((sc.iou, sc.fscore, sc.dice), (1.0, 1.0, 0.0), "sample {}", s.seed);
    }
}

#[test]
fn empty_prediction_scores_zero() {
    let config = RunConfig::default();
    let s = umif::dataset::generate_sample(4, 16, 32).unwrap();
    let empty = umif_core::voxel::VoxelGrid::empty(16);
    let sc = score(&empty, &s.voxel, &config, 1).unwrap();
    assert_eq!((sc.iou, sc.fscore), (0.0, 0.0));
    // only the background term of the two-sided Dice survives
    let (n, g) = (16.0f64.powi(3), s.voxel.occupied() as f64);
    assert!((sc.dice - (1.0 - (n - g) / (2.0 * n - g))).abs() < 1e-12);
}

#[test]
fn view_count_requests_are_checked() {
    assert!(check_view_counts(&[], 24).is_err());
    assert!(check_view_counts(&[0], 24).is_err());
    assert!(check_view_counts(&[25], 24).is_err());
    assert!(check_view_counts(&[1, 24], 24).is_ok());
}

#[test]
fn summary_means_per_view_count() {
    let row = |id, n, iou| EvalRow { sample_id: id, n_views: n, iou, fscore: iou / 2.0, dice: 1.0 - iou };
    let s = summarize(&[row(1, 3, 0.5), row(1, 1, 0.25), row(2, 3, 0.75), row(2, 1, 0.25)]);
    assert_eq!(s.len(), 2);
    assert_eq!((s[0].n_views, s[0].count, s[0].iou, s[0].fscore), (3, 2, 0.625, 0.3125));
    assert_eq!((s[1].n_views, s[1].count, s[1].iou), (1, 2, 0.25));
}
