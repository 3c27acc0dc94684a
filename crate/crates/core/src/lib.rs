pub mod anchor;
pub mod attestation;
pub mod boot;
pub mod cli;
pub mod crypto;
pub mod pca;
pub mod pos;
pub mod prepaid;
pub mod restriction;
pub mod scenarios;
pub mod sim;
