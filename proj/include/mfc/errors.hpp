#pragma once

#include <stdexcept>
#include <string>

namespace mfc {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ParamError : std::runtime_error {
  explicit ParamError(const std::string& msg) : std::runtime_error("parameter error: " + msg) {}
};

struct DegenerateDensityError : std::runtime_error {
  explicit DegenerateDensityError(const std::string& msg)
      : std::runtime_error("degenerate density: " + msg) {}
};

struct EstimationError : std::runtime_error {
  explicit EstimationError(const std::string& msg) : std::runtime_error("estimation error: " + msg) {}
};

struct SimulationDiverged : std::runtime_error {
  explicit SimulationDiverged(const std::string& msg)
      : std::runtime_error("simulation diverged: " + msg) {}
};

struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& msg)
      : std::runtime_error("training diverged: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

}  // namespace mfc
