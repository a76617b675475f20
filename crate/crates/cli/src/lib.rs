//! Command-line tools and the frame server for trained scenes.

pub mod commands;
pub mod protocol;
pub mod serve;
