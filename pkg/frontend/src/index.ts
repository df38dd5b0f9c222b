export * from './api';
export * from './rle';
export * from './overlay';
export * from './state';
