//! A desk-scale masked-language-modeling laboratory built around the
//! LTG-BERT encoder.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod tokenizer;
pub mod training;
