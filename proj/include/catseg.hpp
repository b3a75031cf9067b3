// Copyright (c) 2026 The CatSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "catseg/tensor.hpp"
#include "catseg/rng.hpp"
#include "catseg/ops.hpp"
#include "catseg/autograd.hpp"
#include "catseg/attention.hpp"
#include "catseg/params.hpp"
#include "catseg/blocks.hpp"
#include "catseg/encoder.hpp"
#include "catseg/cost.hpp"
#include "catseg/aggregation.hpp"
#include "catseg/decoder.hpp"
#include "catseg/config.hpp"
#include "catseg/model.hpp"
#include "catseg/inference.hpp"
#include "catseg/training.hpp"
#include "catseg/evaluation.hpp"
#include "catseg/io.hpp"
#include "catseg/synthetic.hpp"
#include "catseg/gradcheck.hpp"
