pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod make_corpus;
pub mod train;
