pub mod tensor;
pub mod ssm;
pub mod attention;
pub mod envs;
pub mod trajectory;
pub mod datagen;
pub mod model;
pub mod harness;
