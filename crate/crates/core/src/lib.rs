pub mod cli;
pub mod contact;
pub mod expr;
pub mod flow;
pub mod hamsys;
pub mod homopode;
pub mod library;
pub mod mtps;
pub mod perturb;
pub mod series;
pub mod subjets;
pub mod tol;
