#pragma once

#include <stdexcept>
#include <string>

namespace xxnet {

// Root of every exception the library throws. Subclasses map onto the CLI
// exit codes: ConfigError/ShapeError/LoadError -> 2, DivergenceError -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class MissingFileError : public LoadError {
public:
    using LoadError::LoadError;
};

class TruncatedRecordError : public LoadError {
public:
    using LoadError::LoadError;
};

class BadLabelError : public LoadError {
public:
    using LoadError::LoadError;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

}  // namespace xxnet
