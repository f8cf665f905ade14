#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace avdit {

/// Invalid configuration. `what()` starts with the dotted field path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Task { TTS, T2AV, TV2A, TI2AV, TR2AV };

inline constexpr std::array<Task, 5> kAllTasks{Task::TTS, Task::T2AV, Task::TV2A, Task::TI2AV, Task::TR2AV};
inline constexpr std::array<Task, 4> kJointTaskCycle{Task::T2AV, Task::TV2A, Task::TI2AV, Task::TR2AV};

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::TTS: return "TTS";
    case Task::T2AV: return "T2AV";
    case Task::TV2A: return "TV2A";
    case Task::TI2AV: return "TI2AV";
    case Task::TR2AV: return "TR2AV";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  for (Task t : kAllTasks) {
    if (task_name(t) == s) return t;
  }
  throw std::invalid_argument("unknown task: " + std::string(s));
}

/// Tasks whose output includes a generated video stream.
inline bool task_generates_video(Task t) { return t == Task::T2AV || t == Task::TI2AV || t == Task::TR2AV; }

}  // namespace avdit
