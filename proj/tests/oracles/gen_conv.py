#!/usr/bin/env python3
"""Naive 3x3 convolution reference (no im2col, no BLAS).

Integer-valued inputs and kernels keep float arithmetic exact, so the frozen
expectations in ops_test.cpp compare with ==. Layouts match the C++ side:
input [C,H,W], kernel [O,C,3,3], "valid" shrinks by 2, "pad" keeps H,W.
"""


def conv(inp, ker, bias, pad):
    c = len(inp)
    h = len(inp[0])
    w = len(inp[0][0])
    o = len(ker)
    if pad:
        oh, ow, off = h, w, -1
    else:
        oh, ow, off = h - 2, w - 2, 0
    out = []
    for f in range(o):
        plane = []
        for y in range(oh):
            row = []
            for x in range(ow):
                acc = bias[f]
                for ci in range(c):
                    for ky in range(3):
                        for kx in range(3):
                            iy = y + ky + off
                            ix = x + kx + off
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += ker[f][ci][ky][kx] * inp[ci][iy][ix]
                row.append(acc)
            plane.append(row)
        out.append(plane)
    return out


def show(name, out):
    print(name)
    for plane in out:
        for row in plane:
            print("  " + ", ".join(str(v) for v in row) + ",")


def main():
    # 1 channel, 4x4 ramp input; 2 filters: identity-center and Laplacian-ish
    inp = [[[y * 4 + x for x in range(4)] for y in range(4)]]
    ker = [
        [[[0, 0, 0], [0, 1, 0], [0, 0, 0]]],
        [[[0, 1, 0], [1, -4, 1], [0, 1, 0]]],
    ]
    bias = [10, 0]
    show("valid 4x4 -> 2x2, filters [center+10, laplacian]:", conv(inp, ker, bias, False))
    show("padded 4x4 -> 4x4, same filters:", conv(inp, ker, bias, True))

    # 2 channels, 3x3, single filter mixing both channels
    inp2 = [
        [[1, 2, 3], [4, 5, 6], [7, 8, 9]],
        [[9, 8, 7], [6, 5, 4], [3, 2, 1]],
    ]
    ker2 = [[
        [[1, 0, 0], [0, 2, 0], [0, 0, 3]],
        [[0, 0, 1], [0, -1, 0], [1, 0, 0]],
    ]]
    show("2-channel valid 3x3 -> 1x1:", conv(inp2, ker2, [0], False))


if __name__ == "__main__":
    main()
