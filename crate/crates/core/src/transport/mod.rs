//! Moving [`Envelope`](crate::message::Envelope)s between consenters.

pub mod sim;
pub mod tcp;
