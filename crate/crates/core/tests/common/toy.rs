//! Desk-scale training runs shared by the acceptance suite.

use kdf_core::data::{
    blobs, read_fer_from, synthetic_fer_rows, write_fer_csv, ImageSpec, Sample, Split,
};
use kdf_core::distill::DistillConfig;
use kdf_core::metrics::evaluate;
use kdf_core::train::{fit, Teacher, TrainConfig};
use kdf_core::zoo::{checkpoint, halve_channels, Model, ModelConfig};

pub const BLOB_SHAPE: [usize; 3] = [3, 12, 12];
pub const TEACHER_WIDTH: usize = 8;

pub struct Distillation {
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub teacher_unchanged: bool,
    pub student_epochs: usize,
    pub teacher_log: String,
    pub student_log: String,
    pub teacher_checkpoint: Vec<u8>,
    pub student_checkpoint: Vec<u8>,
}

pub fn blob_data(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = ImageSpec::from_shape(BLOB_SHAPE);
    let train = blobs(64, &spec, 0.2, Split::Training, seed, 7);
    let held_out = blobs(16, &spec, 0.2, Split::Test, seed + 1, 7);
    (train, held_out)
}

pub fn blob_teacher_config() -> ModelConfig {
    super::two_stage("toy_teacher", TEACHER_WIDTH, BLOB_SHAPE)
}

/// Train the teacher on the blobs, freeze it, then distill a half-width
/// student at the given temperature and alpha.
pub fn distill_blobs(seed: u64, temperature: f64, alpha: f64) -> Distillation {
    let (train, held_out) = blob_data(seed);
    let teacher_cfg = blob_teacher_config();
    let base = TrainConfig {
        epochs: 40,
        seed,
        ..TrainConfig::default()
    };
    let mut teacher = Model::build(&teacher_cfg, seed).unwrap();
    let trained = fit(&mut teacher, &train, &held_out, &base, None).unwrap();
    let teacher = trained.best;
    let teacher_accuracy = evaluate(&teacher, &held_out, 64).unwrap().accuracy;
    let teacher_checkpoint = checkpoint::to_bytes(&teacher);

    let student_cfg = ModelConfig {
        name: "toy_student".into(),
        ..halve_channels(&teacher_cfg, 2).unwrap()
    };
    let mut student = Model::build(&student_cfg, seed + 100).unwrap();
    let frozen = Teacher {
        model: &teacher,
        distill: DistillConfig::new(temperature, alpha),
    };
    let cfg = TrainConfig {
        epochs: 100,
        ..base
    };
    let distilled = fit(&mut student, &train, &held_out, &cfg, Some(&frozen)).unwrap();
    let student_accuracy = evaluate(&distilled.best, &held_out, 64).unwrap().accuracy;

    Distillation {
        teacher_accuracy,
        student_accuracy,
        teacher_unchanged: checkpoint::to_bytes(&teacher) == teacher_checkpoint,
        student_epochs: distilled.report.epochs.len(),
        teacher_log: trained.report.to_csv(),
        student_log: distilled.report.to_csv(),
        teacher_checkpoint,
        student_checkpoint: checkpoint::to_bytes(&distilled.best),
    }
}

pub struct Overfit {
    pub samples: usize,
    pub best_train_accuracy: f64,
    /// First epoch whose training accuracy reached 99%.
    pub epoch_reached: Option<usize>,
    pub epochs: usize,
    /// Eval-mode accuracy of the returned snapshot on the same 64 samples.
    pub eval_accuracy: f64,
}

/// Student C on a 64-sample FER-format fixture, parsed from CSV text, under
/// the default regimen (batch 16, SGD 1e-3 with momentum, plateau decay,
/// class weighting, flips).
pub fn overfit_student_c(epochs: usize) -> Overfit {
    let mut rows = synthetic_fer_rows(10, Split::Training, 11);
    rows.truncate(64);
    let mut csv = Vec::new();
    write_fer_csv(&mut csv, &rows).unwrap();
    let cfg = ModelConfig::student_c();
    let spec = ImageSpec::from_shape(cfg.input_shape);
    let samples =
        read_fer_from(csv.as_slice(), std::path::Path::new("fixture.csv"), &spec).unwrap();
    let mut model = Model::build(&cfg, 3).unwrap();
    let train_cfg = TrainConfig {
        epochs,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &samples, &[], &train_cfg, None).unwrap();
    let accs: Vec<f64> = out.report.epochs.iter().map(|e| e.train_accuracy).collect();
    Overfit {
        samples: samples.len(),
        best_train_accuracy: accs.iter().cloned().fold(0.0, f64::max),
        epoch_reached: accs.iter().position(|&a| a >= 99.0).map(|i| i + 1),
        epochs,
        eval_accuracy: evaluate(&out.best, &samples, 64).unwrap().accuracy,
    }
}
