pub mod ad;
pub mod dynamics;
pub mod harness;
pub mod nlp;
pub mod nmpc;
pub mod ocp;
pub mod par;
pub mod reference;
pub mod sensitivity;
