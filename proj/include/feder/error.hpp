#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace feder {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatchError : public Error {
public:
  using Error::Error;
};

class NonFiniteError : public Error {
public:
  using Error::Error;
};

class DimensionTooLargeError : public Error {
public:
  using Error::Error;
};

class ZeroSpectrumError : public Error {
public:
  using Error::Error;
};

// Q_ER of an all-zero effective-rank vector would be log(0).
class NegativeInfinityError : public Error {
public:
  using Error::Error;
};

class LabelOutOfRangeError : public Error {
public:
  using Error::Error;
};

class InvalidArgumentError : public Error {
public:
  using Error::Error;
};

// Naive FedER on a layer where every client has zero effective rank.
class DegenerateLayerError : public Error {
public:
  DegenerateLayerError(std::string layer)
      : Error("degenerate layer '" + layer + "': sum of client effective ranks is zero"),
        layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

private:
  std::string layer_;
};

class ConfigError : public Error {
public:
  ConfigError(std::string key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

private:
  std::string key_;
};

class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace feder
