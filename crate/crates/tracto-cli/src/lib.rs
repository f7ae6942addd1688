//! CLI support library.
