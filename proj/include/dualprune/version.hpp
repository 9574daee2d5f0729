#pragma once

namespace dualprune {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kSelectionSchema = "dualprune-selection-v1";
inline constexpr const char* kReportSchema = "dualprune-report-v1";

}  // namespace dualprune
