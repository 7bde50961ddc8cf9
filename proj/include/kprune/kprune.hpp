// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "kprune/container.hpp"
#include "kprune/dataset.hpp"
#include "kprune/error.hpp"
#include "kprune/evaluate.hpp"
#include "kprune/knowledge.hpp"
#include "kprune/kpms.hpp"
#include "kprune/kpp.hpp"
#include "kprune/model.hpp"
#include "kprune/parallel.hpp"
#include "kprune/runtime.hpp"
#include "kprune/synth.hpp"
#include "kprune/tensor.hpp"
