#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "bowda/losses.hpp"
#include "bowda/networks.hpp"
#include "bowda/phantom.hpp"
#include "bowda/pipeline.hpp"

// JSON forms of the configuration types. Readers reject unknown keys so that a
// typo in an experiment file fails loudly instead of silently using a default.

namespace bowda {

using Json = nlohmann::json;

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);
/// Digest of the canonical (sorted-key, compact) dump.
std::string json_digest(const Json& j);

void to_json(Json& j, const Dims& d);
void from_json(const Json& j, Dims& d);
void to_json(Json& j, const Spacing& s);
void from_json(const Json& j, Spacing& s);
void to_json(Json& j, const LossConfig& c);
void from_json(const Json& j, LossConfig& c);
void to_json(Json& j, const DRBConfig& c);
void from_json(const Json& j, DRBConfig& c);
void to_json(Json& j, const SNetFlags& c);
void from_json(const Json& j, SNetFlags& c);
void to_json(Json& j, const SNetConfig& c);
void from_json(const Json& j, SNetConfig& c);
void to_json(Json& j, const DiscriminatorConfig& c);
void from_json(const Json& j, DiscriminatorConfig& c);
void to_json(Json& j, const DomainSpec& c);
void from_json(const Json& j, DomainSpec& c);
void to_json(Json& j, const WindowSpec& c);
void from_json(const Json& j, WindowSpec& c);

/// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void require_known_keys(const Json& j, std::initializer_list<const char*> allowed, const char* what);

/// Applies `dotted.key=value` to `j`. The value is parsed as JSON when
/// possible, otherwise stored as a string. Missing intermediate objects are created.
void apply_override(Json& j, const std::string& assignment);

}  // namespace bowda
