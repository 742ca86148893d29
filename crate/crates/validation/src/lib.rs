//! Test-only package. The `acceptance` target runs the end-to-end checks and
//! prints one PASS/FAIL line per criterion.
