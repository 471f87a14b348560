pub mod oracles;
pub mod roc_oracle;
