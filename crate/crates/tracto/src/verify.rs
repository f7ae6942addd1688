//! Model acceptance suite.
