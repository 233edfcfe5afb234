#pragma once

#include <stdexcept>
#include <string>

namespace crowd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// tensor core
struct ShapeMismatch : Error { using Error::Error; };
struct InvalidHyperparameter : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct DetachedGraph : Error { using Error::Error; };

// density codec
struct PointOutOfBounds : Error { using Error::Error; };
struct NonPositiveSigma : Error { using Error::Error; };
struct IndivisibleShape : Error { using Error::Error; };

// prototype fitting
struct AllSamplesDegenerate : Error { using Error::Error; };

// episodes
struct SceneTooSmall : Error { using Error::Error; };
struct CropTooLarge : Error { using Error::Error; };

// metrics
struct EmptyInput : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };

// plumbing
struct IoError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

} // namespace crowd
