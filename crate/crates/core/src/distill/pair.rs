use std::collections::BTreeMap;

use crate::diffusion::NoisedBatch;
use crate::distill::config::{DistillConfig, Scenario};
use crate::error::{Error, Result};
use crate::host::{AttachedModel, DenoiseInput, NoisePredictor, Prediction, ToyDenoiser, TrainScope};
use crate::params::{param_hash, Parameterized};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Maps teacher condition ids to student condition ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Translator {
    Identity,
    /// `student_id = table[teacher_id]`, a bijection.
    Permutation(Vec<usize>),
}

impl Translator {
    pub fn seeded(vocab: usize, seed: u64) -> Self {
        Translator::Permutation(SeededRng::new(seed).permutation(vocab))
    }

    pub fn apply(&self, ids: &[usize]) -> Result<Vec<usize>> {
        match self {
            Translator::Identity => Ok(ids.to_vec()),
            Translator::Permutation(p) => ids
                .iter()
                .map(|&i| {
                    p.get(i)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("condition id {i} outside translator of {}", p.len())))
                })
                .collect(),
        }
    }
}

/// Teacher values copied off its own tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub eps: Tensor,
    pub features: BTreeMap<String, Tensor>,
}

/// `mean((ε_T − ε_S)²)` over all elements.
pub fn outkd_loss(tape: &mut Tape, teacher_eps: &Tensor, student_eps: Var) -> Result<Var> {
    let t = tape.constant(teacher_eps.clone());
    tape.mse(student_eps, t)
}

/// Sum over `layers` of the per-layer mean squared feature difference.
pub fn featkd_loss(
    tape: &mut Tape,
    scenario: Scenario,
    teacher: &TeacherOutputs,
    student: &Prediction,
    layers: &[String],
) -> Result<Var> {
    if scenario == Scenario::Unshared {
        return Err(Error::Contract(
            "feature distillation is undefined between models with different condition encoders".into(),
        ));
    }
    let mut total = tape.constant(Tensor::zeros(vec![1]));
    for layer in layers {
        let t = teacher
            .features
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("teacher has no feature map `{layer}`")))?;
        let s = *student
            .features
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("student has no feature map `{layer}`")))?;
        if t.shape() != tape.shape(s) {
            return Err(Error::Contract(format!(
                "feature map `{layer}` is {:?} in the teacher but {:?} in the student",
                t.shape(),
                tape.shape(s)
            )));
        }
        let tv = tape.constant(t.clone());
        let l = tape.mse(s, tv)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub total: Var,
    pub outkd: Var,
    /// Absent when the feature term carries no weight.
    pub featkd: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentPair {
    teacher: ToyDenoiser,
    student: AttachedModel,
    translator: Translator,
    scenario: Scenario,
}

impl TeacherStudentPair {
    /// Freezes the teacher. The student base is already frozen by attachment.
    pub fn new(teacher: ToyDenoiser, student: AttachedModel, translator: Translator, scenario: Scenario) -> Result<Self> {
        let mut teacher = teacher;
        teacher.set_train_scope(TrainScope::Frozen);
        if teacher.spec().data_dim != student.base().spec().data_dim {
            return Err(Error::Contract("teacher and student predict different data widths".into()));
        }
        if scenario == Scenario::Shared && translator != Translator::Identity {
            return Err(Error::Config("the shared scenario uses the identity translator".into()));
        }
        Ok(TeacherStudentPair {
            teacher,
            student,
            translator,
            scenario,
        })
    }

    pub fn teacher(&self) -> &ToyDenoiser {
        &self.teacher
    }

    pub fn student(&self) -> &AttachedModel {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut AttachedModel {
        &mut self.student
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn translator(&self) -> &Translator {
        &self.translator
    }

    pub fn into_student(self) -> AttachedModel {
        self.student
    }

    /// Hashes of the teacher and of the student base, for frozen-weight audits.
    pub fn frozen_hashes(&self) -> (String, String) {
        (
            param_hash(&self.teacher.named_params()),
            param_hash(&self.student.base().named_params()),
        )
    }

    pub fn teacher_outputs(&self, input: &DenoiseInput, layers: &[String]) -> Result<TeacherOutputs> {
        let mut tape = Tape::new();
        let p = self.teacher.predict(&mut tape, input)?;
        let mut features = BTreeMap::new();
        for l in layers {
            if let Some(&v) = p.features.get(l) {
                features.insert(l.clone(), tape.tensor(v));
            }
        }
        Ok(TeacherOutputs {
            eps: tape.tensor(p.eps),
            features,
        })
    }

    /// The same noisy batch with conditions rewritten for the student.
    pub fn student_input(&self, input: &DenoiseInput) -> Result<DenoiseInput> {
        DenoiseInput::new(input.z.clone(), self.translator.apply(&input.cond)?, input.t.clone())
    }

    /// Weighted objective on one noised batch, recorded on `tape`.
    pub fn losses(&self, tape: &mut Tape, config: &DistillConfig, batch: &DenoiseInput) -> Result<DistillTerms> {
        config.validate()?;
        if config.scenario != self.scenario {
            return Err(Error::Config(format!(
                "config scenario `{}` does not match the pair's `{}`",
                config.scenario, self.scenario
            )));
        }
        let use_feat = config.lambda_featkd > 0.0;
        let layers: &[String] = if use_feat { &config.feature_layers } else { &[] };
        let teacher = self.teacher_outputs(batch, layers)?;
        let student = self.student.predict(tape, &self.student_input(batch)?)?;
        let outkd = outkd_loss(tape, &teacher.eps, student.eps)?;
        let mut total = tape.scale(outkd, config.lambda_outkd);
        let featkd = if use_feat {
            let f = featkd_loss(tape, self.scenario, &teacher, &student, layers)?;
            let wf = tape.scale(f, config.lambda_featkd);
            total = tape.add(total, wf)?;
            Some(f)
        } else {
            None
        };
        Ok(DistillTerms { total, outkd, featkd })
    }

    /// Output loss of the current student on a fixed noised batch.
    pub fn heldout_outkd(&self, batch: &NoisedBatch) -> Result<f64> {
        let teacher = self.teacher_outputs(&batch.input, &[])?;
        let mut tape = Tape::new();
        let s = self.student.predict(&mut tape, &self.student_input(&batch.input)?)?;
        let l = outkd_loss(&mut tape, &teacher.eps, s.eps)?;
        Ok(tape.item(l))
    }
}
