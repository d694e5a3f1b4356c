// Copyright (c) the spcac project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Umbrella header for the whole library.

#include "spcac/autodiff.hpp"
#include "spcac/codec.hpp"
#include "spcac/color.hpp"
#include "spcac/common.hpp"
#include "spcac/entropy_model.hpp"
#include "spcac/eval.hpp"
#include "spcac/range_coder.hpp"
#include "spcac/sparse_tensor.hpp"
#include "spcac/training.hpp"
