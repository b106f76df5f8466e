#include "sfe/inference.hpp"

namespace sfe {

InferenceScheme scheme_from_string(const std::string& name) {
  if (name == "si") return InferenceScheme::SingleInference;
  if (name == "ag") return InferenceScheme::AggregatedInference;
  if (name == "sd") return InferenceScheme::DistilledInference;
  throw ConfigError("unknown inference scheme '" + name +
                    "' (expected si, ag or sd)");
}

std::string scheme_name(InferenceScheme scheme) {
  switch (scheme) {
    case InferenceScheme::SingleInference:
      return "si";
    case InferenceScheme::AggregatedInference:
      return "ag";
    case InferenceScheme::DistilledInference:
      return "sd";
  }
  throw ConfigError("invalid inference scheme");
}

}  // namespace sfe
