//! Compiles every code snippet in the book under `book/` as a doc-test.
