// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iostream>

namespace divseq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `divseq` tool. Subcommands: build-vocab, synth, train,
/// generate, evaluate, score.
int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace divseq::cli
