// Copyright 2026 The vqcspace Authors.
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

#include <stdexcept>
#include <string>

namespace vqc {

// Shape or dimension mismatch between operands.
class shape_error : public std::invalid_argument {
 public:
  explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid argument value (out-of-range index, bad parameter).
class value_error : public std::invalid_argument {
 public:
  explicit value_error(const std::string& what) : std::invalid_argument(what) {}
};

// On-disk data problems. `category` distinguishes failure modes so callers
// can react (and tests can assert) without string matching.
class data_error : public std::runtime_error {
 public:
  enum class category {
    bad_magic,
    bad_version,
    config_mismatch,
    truncated,
    integrity,
    malformed,
  };

  data_error(category c, const std::string& what)
      : std::runtime_error(what), category_(c) {}

  category kind() const { return category_; }

 private:
  category category_;
};

// Non-finite values encountered during optimization.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vqc
