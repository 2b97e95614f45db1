#pragma once

#include <stdexcept>
#include <string>

namespace tractscope {

// Raised for malformed user-supplied data or flags. The CLI maps this to
// exit code 1; every other exception maps to exit code 2.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tractscope
