#pragma once

// Child-process helpers for driving the portobello binary from tests.

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "portobello/cloud_io.hpp"

namespace proc {

namespace fs = std::filesystem;

/// Starts `args` with stdout and stderr redirected to files.
inline pid_t spawn(const std::vector<std::string>& args, const fs::path& out, const fs::path& err) {
  const pid_t pid = ::fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    const int o = ::open(out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    const int e = ::open(err.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    ::dup2(o, 1);
    ::dup2(e, 2);
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execv(argv[0], argv.data());
    ::_exit(127);
  }
  return pid;
}

inline int wait_exit(pid_t pid) {
  int status = 0;
  ::waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
}

struct Result {
  int code;
  std::string out, err;
};

/// Runs the CLI to completion.
inline Result cli(const fs::path& dir, std::vector<std::string> args) {
  args.insert(args.begin(), PORTOBELLO_CLI);
  const fs::path out = dir / "cli.out", err = dir / "cli.err";
  const int code = wait_exit(spawn(args, out, err));
  return {code, portobello::read_file(out), portobello::read_file(err)};
}

/// Reads `path` if it exists yet, else "".
inline std::string peek(const fs::path& path) {
  std::error_code ec;
  return fs::exists(path, ec) ? portobello::read_file(path) : std::string();
}

}  // namespace proc
