#pragma once

#include <string>

namespace dape::testing {

// Scoped scratch directory under the system temp root; removed on destruction.
struct TmpDir {
    std::string path;
    explicit TmpDir(const std::string& label);
    ~TmpDir();
    TmpDir(const TmpDir&) = delete;
    TmpDir& operator=(const TmpDir&) = delete;
};

}  // namespace dape::testing
