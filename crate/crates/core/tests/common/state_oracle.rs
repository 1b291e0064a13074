//! Direct restatements of the template-update rule and the prompt pipeline.

use rand::Rng as _;
use uautrack::datamodel::BBox;
use uautrack::numerics::seeded_rng;
use uautrack::prompt::{categorize, prompt_for_frame, render_prompt, PromptConfig, SizeCategory};
use uautrack::runtime::should_update_template;

/// Update on every 25th frame when the confidence exceeds 0.7.
pub fn update_oracle(index: usize, confidence: f64) -> bool {
    index / 25 * 25 == index && !(confidence <= 0.7)
}

/// Number of disagreements between the library rule and the oracle over
/// `n` random pairs. Indices favor multiples of 25 and confidences favor
/// values near 0.7 so that both branches are exercised.
pub fn update_rule_mismatches(seed: u64, n: usize) -> usize {
    let mut rng = seeded_rng(seed);
    (0..n)
        .filter(|_| {
            let index = if rng.gen_bool(0.4) { 25 * rng.gen_range(0..400) } else { rng.gen_range(0..10_000) };
            let confidence = match rng.gen_range(0..4) {
                0 => 0.7,
                1 => 0.7 + rng.gen_range(-1e-9..1e-9),
                _ => rng.gen_range(0.0..1.0),
            };
            should_update_template(index, confidence, 25, 0.7) != update_oracle(index, confidence)
        })
        .count()
}

/// `(index, confidence, expected)` cases at the boundaries.
pub const UPDATE_BOUNDARIES: [(usize, f64, bool); 9] = [
    (25, 0.7, false),
    // The neighbouring doubles of 0.7.
    (25, 0.7000000000000001, true),
    (25, 0.6999999999999999, false),
    (24, 0.99, false),
    (26, 0.99, false),
    (50, 0.8, true),
    (50, 0.6, false),
    (30, 0.9, false),
    (0, 1.0, true),
];

/// Categories must not decrease as the diagonal grows.
pub fn categorize_monotone(seed: u64, n: usize) -> bool {
    let cfg = PromptConfig::default();
    let mut rng = seeded_rng(seed);
    let mut diags: Vec<f64> = (0..n)
        .map(|i| match i % 3 {
            0 => rng.gen_range(1e-3..100.0),
            1 => cfg.thresholds[rng.gen_range(0..3)] + rng.gen_range(-1e-9..1e-9),
            _ => rng.gen_range(1e-3..1e4),
        })
        .collect();
    diags.sort_by(f64::total_cmp);
    let cats: Vec<SizeCategory> = diags.iter().map(|&d| categorize(d, &cfg).unwrap()).collect();
    cats.windows(2).all(|w| w[0] <= w[1])
}

pub fn render_strings_exact() -> bool {
    [
        (SizeCategory::Tiny, "track a tiny drone"),
        (SizeCategory::Small, "track a small drone"),
        (SizeCategory::Medium, "track a medium drone"),
        (SizeCategory::Normal, "track a normal drone"),
    ]
    .iter()
    .all(|(c, s)| render_prompt(*c) == *s)
}

/// A scripted run: ground truth at frame 0, predictions afterwards, and
/// the previous category carried over frames with no prediction.
pub fn scripted_prompts() -> Vec<String> {
    let cfg = PromptConfig::default();
    let gt = BBox::new(10.0, 10.0, 8.0, 6.0); // diagonal 10
    let medium = BBox::new(0.0, 0.0, 24.0, 32.0); // diagonal 40
    let small = BBox::new(0.0, 0.0, 12.0, 16.0); // diagonal 20
    let script: [(usize, Option<BBox>, Option<BBox>); 6] = [
        (0, Some(gt), None),
        (1, None, Some(medium)),
        (2, None, None),
        (3, None, None),
        (4, None, Some(small)),
        (5, Some(medium), Some(small)),
    ];
    let mut previous = None;
    script
        .iter()
        .map(|(index, gt, pred)| {
            let (cat, text) = prompt_for_frame(*index, gt.as_ref(), pred.as_ref(), previous, &cfg).unwrap();
            previous = Some(cat);
            text
        })
        .collect()
}

/// What [`scripted_prompts`] must produce. Frame 5 ignores the ground truth
/// and follows the prediction.
pub const SCRIPTED_EXPECTED: [&str; 6] = [
    "track a tiny drone",
    "track a medium drone",
    "track a medium drone",
    "track a medium drone",
    "track a small drone",
    "track a small drone",
];
