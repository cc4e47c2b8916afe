// SPDX-License-Identifier: Apache-2.0
//
// mimo-lr: low-rank MIMO channel estimation laboratory
// Copyright (C) 2026 The mimo-lr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#ifndef MLR_ERRORS_HPP
#define MLR_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mlr
{

// Two families: ConfigError maps to CLI exit code 2, NumericalError to exit code 3.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error
{
public:
    using Error::Error;
};

class NumericalError : public Error
{
public:
    using Error::Error;
};

// ---- configuration / input family ----

class InvalidConfig : public ConfigError
{
public:
    explicit InvalidConfig(const std::string &field, const std::string &reason = "invalid value")
        : ConfigError("invalid config field '" + field + "': " + reason), field_(field) {}
    const std::string &field() const noexcept { return field_; }

private:
    std::string field_;
};

// Violated function precondition (bad argument shape or range).
class InvalidArgument : public ConfigError
{
public:
    using ConfigError::ConfigError;
};

class DimensionMismatch : public ConfigError
{
public:
    using ConfigError::ConfigError;
};

class ParseError : public ConfigError
{
public:
    ParseError(std::size_t line, const std::string &reason)
        : ConfigError("parse error at line " + std::to_string(line) + ": " + reason), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class InvariantViolation : public ConfigError
{
public:
    InvariantViolation(unsigned long position_id, const std::string &reason)
        : ConfigError("invariant violated for position " + std::to_string(position_id) + ": " + reason),
          position_id_(position_id) {}
    unsigned long position_id() const noexcept { return position_id_; }

private:
    unsigned long position_id_;
};

class IoError : public ConfigError
{
public:
    using ConfigError::ConfigError;
};

class FormatError : public ConfigError
{
public:
    using ConfigError::ConfigError;
};

// ---- numerical family ----

class NotPositiveDefinite : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class ConvergenceFailure : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class DegenerateSpectrum : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class RankDeficientPilot : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class DelayOverflow : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class NoPath : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

class DegenerateDenominator : public NumericalError
{
public:
    using NumericalError::NumericalError;
};

} // namespace mlr

#endif
