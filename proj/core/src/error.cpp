#include "slipsense/error.hpp"

namespace slipsense {

ExitCode exit_code_for(const std::exception& e) noexcept
{
    if (const auto* err = dynamic_cast<const Error*>(&e)) {
        return err->exit_code();
    }
    return ExitCode::internal;
}

} // namespace slipsense
