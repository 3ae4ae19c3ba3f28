//! Subject maps: the student generator, its critic, distillation losses and teacher maps.

pub mod generator;
pub mod kd;
pub mod loss;
pub mod map;
pub mod teacher;

pub use generator::{student_forward, Discriminator, StudentGenerator};
pub use kd::{discriminator_step, generator_kd_terms, kd_optimizer, kd_step, KdSettings, KdStats};
pub use loss::{adversarial_losses, kd_l2_loss, kd_total_loss, lsgan_losses, KDLossWeights};
pub use map::{MapSource, SubjectMap};
pub use teacher::{load_teacher_maps, oracle_teacher, TeacherMapLoader, TeacherSource};
