#ifndef FTP_FTP_HPP
#define FTP_FTP_HPP

#include "attention.hpp"
#include "autodiff.hpp"
#include "bench.hpp"
#include "dpc.hpp"
#include "gradcheck.hpp"
#include "io.hpp"
#include "model.hpp"
#include "synth.hpp"
#include "tensor.hpp"

#endif
