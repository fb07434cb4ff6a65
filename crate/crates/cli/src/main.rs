// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

use clap::Parser;

fn main() {
    std::process::exit(nvcs_cli::main_with(nvcs_cli::Cli::parse()));
}
