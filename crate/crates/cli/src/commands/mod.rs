pub mod evaluate;
pub mod gradcheck;
pub mod process;
pub mod simulate;
pub mod train;
