#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "fddwnet.h"

#define CHECK(call)                                                          \
  do {                                                                       \
    enum FddwStatus s_ = (call);                                             \
    if (s_ != FDDW_STATUS_OK) {                                              \
      fprintf(stderr, "%s failed: %s (%s)\n", #call, fddw_status_name(s_),   \
              fddw_last_error_message());                                    \
      return 1;                                                              \
    }                                                                        \
  } while (0)

int main(void) {
  FddwNet *net = NULL;
  CHECK(fddw_net_new(4, 0, &net));

  uint64_t trainable = 0, total = 0;
  CHECK(fddw_net_param_count(net, &trainable, &total));

  uint32_t rf = 0;
  CHECK(fddw_receptive_field(3, 9, &rf));

  const uint32_t h = 8, w = 8;
  float input[3 * 8 * 8];
  for (size_t i = 0; i < sizeof input / sizeof input[0]; i++) {
    input[i] = (float)((int)(i % 7) - 3) / 3.0f;
  }
  uint32_t labels[8 * 8];
  CHECK(fddw_net_predict(net, input, 1, h, w, labels, 8 * 8));
  for (size_t i = 0; i < 8 * 8; i++) {
    if (labels[i] >= 4) {
      fprintf(stderr, "label out of range\n");
      return 1;
    }
  }

  size_t size = 0;
  if (fddw_net_save_weights_bytes(net, NULL, 0, &size) !=
      FDDW_STATUS_BUFFER_TOO_SMALL) {
    fprintf(stderr, "size query did not report BUFFER_TOO_SMALL\n");
    return 1;
  }
  unsigned char *buf = malloc(size);
  CHECK(fddw_net_save_weights_bytes(net, buf, size, &size));
  buf[size / 2] ^= 1;
  enum FddwStatus s = fddw_net_load_weights_bytes(net, buf, size);
  free(buf);
  if (s != FDDW_STATUS_CHECKSUM_MISMATCH || strlen(fddw_last_error_message()) == 0) {
    fprintf(stderr, "corrupt archive gave %s\n", fddw_status_name(s));
    return 1;
  }

  printf("trainable=%llu total=%llu rf=%u\n", (unsigned long long)trainable,
         (unsigned long long)total, rf);
  fddw_net_free(net);
  return 0;
}
