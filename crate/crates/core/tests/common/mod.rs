pub mod gradcases;
pub mod oracle;
