// SPDX-License-Identifier: MIT OR Apache-2.0

//! Holds the `acceptance` test target. The library itself is empty.
