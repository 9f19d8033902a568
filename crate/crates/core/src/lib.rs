pub mod agent;
pub mod augment;
pub mod demo;
pub mod expert;
pub mod neural;
pub mod replay;
pub mod sim;
