// include/btda/cli.hpp  (placeholder, replaced by the full command surface)
#pragma once
namespace btda {
inline int run_cli(int, char**) { return 2; }
}  // namespace btda
