// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/cli.hpp"

int main(int argc, char** argv) { return divseq::cli::run(argc, argv); }
