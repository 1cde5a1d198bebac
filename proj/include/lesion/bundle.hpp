#pragma once

// Versioned JSON container for every trained model and the detector config.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "lesion/boost.hpp"
#include "lesion/convnet.hpp"
#include "lesion/detect.hpp"
#include "lesion/levelset.hpp"

namespace lesion {

inline constexpr const char* kBundleVersion = "1.0";

struct ModelBundle {
  std::string version = kBundleVersion;
  std::uint64_t seed = 0;
  DetectorModels detector;
  SegmentConfig segment;
  std::optional<ConvNet> cnn;
};

nlohmann::ordered_json to_json(const StrongClassifier& c);
StrongClassifier classifier_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ConvNet& net);
ConvNet convnet_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const SegmentConfig& c);
SegmentConfig segment_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const ModelBundle& b);
/// Throws IncompatibleVersionError unless the version is kBundleVersion and
/// ConfigError on inconsistent dimensions.
ModelBundle bundle_from_json(const nlohmann::json& j);

/// Throws IoError listing the path when the file cannot be written.
void save_bundle(const ModelBundle& b, const std::filesystem::path& path);
/// Throws IoError (missing/unreadable), FormatError (not JSON) or
/// IncompatibleVersionError.
ModelBundle load_bundle(const std::filesystem::path& path);

}  // namespace lesion
