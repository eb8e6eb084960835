# fake a "test" module for easy imports between test files
