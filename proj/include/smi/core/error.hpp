#pragma once

#include <stdexcept>
#include <string>

namespace smi {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class EmptyInputError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class CalibrationError : public Error { using Error::Error; };
class InitializationError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };

// 5577 A not on the grid and no precomputed efficiencies supplied.
class UnsupportedArmError : public DomainError { using DomainError::DomainError; };

class DetectionError : public Error {
public:
    DetectionError(const std::string& what, std::size_t found, std::size_t expected)
        : Error(what), found_(found), expected_(expected) {}
    std::size_t found() const { return found_; }
    std::size_t expected() const { return expected_; }

private:
    std::size_t found_;
    std::size_t expected_;
};

class UntrainedSegmentError : public Error {
public:
    UntrainedSegmentError(const std::string& what, std::size_t segment)
        : Error(what), segment_(segment) {}
    std::size_t segment() const { return segment_; }

private:
    std::size_t segment_;
};

// An upstream artifact (file in a plate bundle, checkpoint, ...) is absent.
class MissingArtifactError : public Error {
public:
    MissingArtifactError(const std::string& artifact)
        : Error("missing artifact: " + artifact), artifact_(artifact) {}
    const std::string& artifact() const { return artifact_; }

private:
    std::string artifact_;
};

}  // namespace smi
