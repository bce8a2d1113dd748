#pragma once

#include <stdexcept>
#include <string>

namespace ldseg {

// Shape/dimension contract violations (mismatched operands, bad strides, ...).
class shape_error : public std::runtime_error {
public:
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or out-of-domain numeric arguments.
class value_error : public std::runtime_error {
public:
  explicit value_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Config file / CLI argument problems. Exit code 2 at the CLI boundary.
class config_error : public std::runtime_error {
public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// File format problems. Exit code 1 at the CLI boundary. The kind makes
// magic/dtype/truncation failures distinguishable in tests.
class io_error : public std::runtime_error {
public:
  enum class kind {
    open_failed,
    bad_magic,
    bad_dtype,
    truncated,
    bad_header,
    bad_version,
    write_failed,
  };

  io_error(kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  io_error(kind k, const std::string& path, const std::string& msg)
      : std::runtime_error(path + ": " + msg), kind_(k) {}
  kind error_kind() const { return kind_; }

private:
  kind kind_;
};

// Checkpoint incompatibility (wrong model kind, config mismatch). Exit code 4.
class checkpoint_error : public std::runtime_error {
public:
  explicit checkpoint_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Training loss became non-finite. Exit code 3.
class divergence_error : public std::runtime_error {
public:
  explicit divergence_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ldseg
