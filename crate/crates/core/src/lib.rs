pub mod channel;
pub mod control;
pub mod dynamics;
pub mod pomdp;
pub mod system;
pub mod harness;
