pub mod crypto;
pub mod encoding;
pub mod group;
pub mod term;
pub mod doprf;
pub mod pki;
pub mod channel;
pub mod scep;
pub mod screening;
pub mod sim;
