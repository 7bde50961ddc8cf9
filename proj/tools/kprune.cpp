// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "kprune/cli.hpp"

int main(int argc, char** argv) { return kprune::run_cli(argc, argv, std::cout, std::cerr); }
