/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const patch_layout: (a: number, b: number, c: number) => [number, number];
export const revin_demo: (a: number, b: number) => [number, number];
export const train_tiny: (a: bigint, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
