// SPDX-License-Identifier: Apache-2.0
//
// Error hierarchy shared by the library and the CLI. Every failure carries a
// kind that the CLI maps onto its exit-code table (data/validation -> 2,
// I/O -> 3; usage errors never originate here).

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace apl {

enum class ErrorKind { data, io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// File could not be opened, read, written, or renamed.
class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorKind::io, message) {}
};

/// Bytes on disk do not form a valid checkpoint / report / recipe.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& message) : Error(ErrorKind::data, message) {}
};

/// Two tensor maps disagree on names or shapes.
class AlignmentError : public Error {
public:
    explicit AlignmentError(const std::string& message) : Error(ErrorKind::data, message) {}
};

/// A partition schema does not fit the tensor map it is resolved against.
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& message) : Error(ErrorKind::data, message) {}
};

/// Hyperparameter outside its documented bounds.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error(ErrorKind::data, message) {}
};

/// Anything else a precondition rejects (empty batch, bad label, ...).
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message) : Error(ErrorKind::data, message) {}
};

/// Wraps a failure with the pipeline stage it occurred in. The original kind
/// is preserved so exit codes stay meaningful.
class StageError : public Error {
public:
    StageError(std::string stage, ErrorKind kind, const std::string& message)
        : Error(kind, "[stage:" + stage + "] " + message), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Runs `fn` and retags any failure with `stage`.
template <typename Fn>
auto run_stage(std::string_view stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(std::string(stage), e.kind(), e.what());
    } catch (const std::exception& e) {
        throw StageError(std::string(stage), ErrorKind::data, e.what());
    }
}

} // namespace apl
