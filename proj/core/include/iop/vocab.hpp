#ifndef IOP_VOCAB_HPP
#define IOP_VOCAB_HPP

#include <string>

namespace iop {

// Fixed token alphabet for the chain-arithmetic task. Digit tokens are
// contiguous so that digit <-> id conversion is a single offset.
struct Vocab {
  int bos = 0;
  int eos = 1;
  int sep = 2;
  int step = 3;   // "=" marker preceding each intermediate value
  int ans = 4;
  int repair_instr = 5;
  int plus = 6;
  int times = 7;
  int digit0 = 8;  // digits 0..9 occupy [digit0, digit0 + 10)
  int size = 18;

  int digit(int d) const { return digit0 + d; }
  bool is_digit(int tok) const { return tok >= digit0 && tok < digit0 + 10; }
  int digit_value(int tok) const { return tok - digit0; }

  std::string token_name(int tok) const;
};

// The single vocabulary used across the pipeline.
const Vocab& vocab();

}  // namespace iop

#endif  // IOP_VOCAB_HPP
